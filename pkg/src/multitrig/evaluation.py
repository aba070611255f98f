"""Attack success rates and clean mAP over clean/dirty prediction pairs.

Success is tallied with exact integer counters S and T and divided once
at the end. All box matching in the ASR metrics uses strict IoU > 0.5;
both prediction sets are confidence-filtered before any tally. The five
scenario metrics:

    untargeted removal       s_i = max(|clean_i| - |dirty_i|, 0), t_i = |clean_i|
    targeted removal         clean record of the victim class succeeds iff no
                             same-class dirty record overlaps it
    untargeted misclassification
                             clean record fails iff a same-class dirty record
                             overlaps it, unless that dirty record is attributed
                             to a different clean record it misclassifies
    targeted misclassification
                             clean victim-class record succeeds iff some dirty
                             record of the destination class overlaps it
    untargeted generation    per-sample: success iff |dirty| > |clean|
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .core import DetectionSet, iou
from .data import Sample
from .detector import GridDetector, decode
from .targets import ALL_SCENARIOS, AttackTarget, Scenario, encode
from .trigger import InjectionConfig, TriggerGenerator, inject

IOU_MATCH = 0.5


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionPair:
    clean: DetectionSet
    dirty: DetectionSet
    sample_id: str
    target: AttackTarget


@dataclass(frozen=True)
class AsrCount:
    successes: int
    total: int

    @property
    def value(self) -> float | None:
        if self.total == 0:
            return None
        return self.successes / self.total

    def __add__(self, other: "AsrCount") -> "AsrCount":
        return AsrCount(self.successes + other.successes, self.total + other.total)


# ---------------------------------------------------------------------------
# The five tallies


def tally_untargeted_removal(pairs: Sequence[PredictionPair]) -> AsrCount:
    s = t = 0
    for pair in pairs:
        t_i = len(pair.clean)
        s += max(t_i - len(pair.dirty), 0)
        t += t_i
    return AsrCount(s, t)


def tally_targeted_removal(pairs: Sequence[PredictionPair], c_v: int) -> AsrCount:
    s = t = 0
    for pair in pairs:
        dirty_v = [d for d in pair.dirty if d.class_id == c_v]
        for rec in pair.clean:
            if rec.class_id != c_v:
                continue
            t += 1
            if not any(iou(rec.box, d.box) > IOU_MATCH for d in dirty_v):
                s += 1
    return AsrCount(s, t)


def _attribute_dirty(pair: PredictionPair) -> dict[int, int]:
    """Greedy injective attribution of dirty records to clean records.

    Dirty records are processed in descending score order (ties by set
    order) and claim the not-yet-claimed clean record of highest IoU
    above 0.5, if any. Returns {dirty index: clean index}.
    """
    order = sorted(range(len(pair.dirty)), key=lambda i: (-pair.dirty.records[i].score, i))
    taken: set[int] = set()
    attribution: dict[int, int] = {}
    for di in order:
        d = pair.dirty.records[di]
        best_ci = -1
        best_iou = IOU_MATCH
        for ci, c in enumerate(pair.clean.records):
            if ci in taken:
                continue
            overlap = iou(c.box, d.box)
            if overlap > best_iou:
                best_iou = overlap
                best_ci = ci
        if best_ci >= 0:
            attribution[di] = best_ci
            taken.add(best_ci)
    return attribution


def tally_untargeted_miscls(pairs: Sequence[PredictionPair]) -> AsrCount:
    s = t = 0
    for pair in pairs:
        attribution = _attribute_dirty(pair)
        for ci, c in enumerate(pair.clean.records):
            t += 1
            survived = False
            for di, d in enumerate(pair.dirty.records):
                if d.class_id != c.class_id or iou(c.box, d.box) <= IOU_MATCH:
                    continue
                # d still claims c's class at c's location, so c was not
                # misclassified, unless d is a misclassification of some
                # other clean record (the attribution exonerates it).
                owner = attribution.get(di)
                if owner is not None and owner != ci and pair.clean.records[owner].class_id != d.class_id:
                    continue
                survived = True
                break
            if not survived:
                s += 1
    return AsrCount(s, t)


def tally_targeted_miscls(pairs: Sequence[PredictionPair], c_v: int, c_t: int) -> AsrCount:
    s = t = 0
    for pair in pairs:
        dirty_t = [d for d in pair.dirty if d.class_id == c_t]
        for rec in pair.clean:
            if rec.class_id != c_v:
                continue
            t += 1
            if any(iou(rec.box, d.box) > IOU_MATCH for d in dirty_t):
                s += 1
    return AsrCount(s, t)


def tally_untargeted_generation(pairs: Sequence[PredictionPair]) -> AsrCount:
    s = 0
    for pair in pairs:
        if len(pair.dirty) > len(pair.clean):
            s += 1
    return AsrCount(s, len(pairs))


def asr_untargeted_removal(pairs: Sequence[PredictionPair]) -> float | None:
    return tally_untargeted_removal(pairs).value


def asr_targeted_removal(pairs: Sequence[PredictionPair], c_v: int) -> float | None:
    return tally_targeted_removal(pairs, c_v).value


def asr_untargeted_miscls(pairs: Sequence[PredictionPair]) -> float | None:
    return tally_untargeted_miscls(pairs).value


def asr_targeted_miscls(pairs: Sequence[PredictionPair], c_v: int, c_t: int) -> float | None:
    return tally_targeted_miscls(pairs, c_v, c_t).value


def asr_untargeted_generation(pairs: Sequence[PredictionPair]) -> float | None:
    return tally_untargeted_generation(pairs).value


# ---------------------------------------------------------------------------
# Report


@dataclass
class ScenarioResult:
    scenario: Scenario
    counts: dict[tuple[int, ...], AsrCount] = field(default_factory=dict)

    @property
    def mean(self) -> float | None:
        values = [c.value for c in self.counts.values() if c.total > 0]
        if not values:
            return None
        return float(np.mean(values))

    @property
    def aggregate(self) -> AsrCount:
        total = AsrCount(0, 0)
        for c in self.counts.values():
            total = total + c
        return total


@dataclass
class AsrReport:
    results: dict[Scenario, ScenarioResult] = field(default_factory=dict)

    def mean_asr(self, scenario: Scenario) -> float | None:
        res = self.results.get(scenario)
        return None if res is None else res.mean

    def to_dict(self) -> dict:
        out = {}
        for scenario, res in self.results.items():
            out[scenario.value] = {
                "mean": res.mean,
                "configs": [
                    {"config": list(key), "successes": c.successes, "total": c.total, "value": c.value}
                    for key, c in sorted(res.counts.items())
                ],
            }
        return out

    @staticmethod
    def from_dict(d: dict) -> "AsrReport":
        report = AsrReport()
        for name, body in d.items():
            scenario = Scenario(name)
            res = ScenarioResult(scenario)
            for row in body["configs"]:
                res.counts[tuple(row["config"])] = AsrCount(int(row["successes"]), int(row["total"]))
            report.results[scenario] = res
        return report


def _fmt(value: float | None) -> str:
    return "  n/a" if value is None else f"{100 * value:5.1f}"


def render_asr_table(report: AsrReport, clean_map: float | None = None, title: str = "attack success rates (%)") -> str:
    lines = [title]
    if clean_map is not None:
        lines.append(f"  clean mAP@[.5:.95]: {100 * clean_map:5.1f}")
    header = f"  {'scenario':<28} {'ASR':>6} {'S/T':>12}"
    lines.append(header)
    for scenario in ALL_SCENARIOS:
        res = report.results.get(scenario)
        if res is None:
            continue
        agg = res.aggregate
        lines.append(f"  {scenario.value:<28} {_fmt(res.mean):>6} {agg.successes:>6}/{agg.total}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Clean mAP (COCO-style)

MAP_THRESHOLDS = tuple(i / 100 for i in range(50, 100, 5))
RECALL_POINTS = tuple(i / 100 for i in range(0, 101))


@dataclass
class MapResult:
    map_50_95: float | None
    map_50: float | None
    per_class: dict[int, float] = field(default_factory=dict)


def _average_precision(matches: list[tuple[float, bool]], n_gt: int) -> float:
    """101-point interpolated AP from (score, is_tp) rows, already sorted."""
    if n_gt == 0:
        return 0.0
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for _, is_tp in matches:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # precision envelope: max precision at recall >= r
    ap = 0.0
    for r in RECALL_POINTS:
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        ap += best
    return ap / len(RECALL_POINTS)


def _class_matches(predictions: Sequence[DetectionSet], ground_truth: Sequence[DetectionSet], class_id: int, threshold: float) -> tuple[list[tuple[float, bool]], int]:
    rows = []  # (score, image index, record index, box)
    for img, preds in enumerate(predictions):
        for ri, rec in enumerate(preds):
            if rec.class_id == class_id:
                rows.append((rec.score, img, ri, rec.box))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    gt_boxes = {img: [rec.box for rec in gts if rec.class_id == class_id] for img, gts in enumerate(ground_truth)}
    n_gt = sum(len(v) for v in gt_boxes.values())
    used: dict[int, set[int]] = {img: set() for img in gt_boxes}
    matches = []
    for score, img, _, box in rows:
        best_gi = -1
        best_iou = 0.0
        for gi, gt_box in enumerate(gt_boxes.get(img, [])):
            if gi in used[img]:
                continue
            overlap = iou(box, gt_box)
            if overlap > best_iou:
                best_iou = overlap
                best_gi = gi
        if best_gi >= 0 and best_iou >= threshold:
            used[img].add(best_gi)
            matches.append((score, True))
        else:
            matches.append((score, False))
    return matches, n_gt


def clean_map(predictions: Sequence[DetectionSet], ground_truth: Sequence[DetectionSet]) -> MapResult:
    """mAP@[.5:.95] and mAP@50 over aligned prediction/ground-truth lists.

    Per class: predictions pooled across images, sorted by descending
    score, greedily matched to the unmatched ground-truth box of highest
    IoU when that IoU reaches the threshold. AP averages 101-point
    interpolated precision; classes absent from the ground truth are
    skipped.
    """
    if len(predictions) != len(ground_truth):
        raise EvalError(f"{len(predictions)} prediction sets vs {len(ground_truth)} ground-truth sets")
    classes = sorted({rec.class_id for gts in ground_truth for rec in gts})
    if not classes:
        return MapResult(None, None)
    per_class = {}
    per_class_50 = {}
    for class_id in classes:
        aps = []
        for threshold in MAP_THRESHOLDS:
            matches, n_gt = _class_matches(predictions, ground_truth, class_id, threshold)
            aps.append(_average_precision(matches, n_gt))
        per_class[class_id] = float(np.mean(aps))
        per_class_50[class_id] = aps[0]
    return MapResult(
        map_50_95=float(np.mean(list(per_class.values()))),
        map_50=float(np.mean(list(per_class_50.values()))),
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# End-to-end attack evaluation

InputFilter = Callable[[np.ndarray], np.ndarray]


def _to_batch(samples: Sequence[Sample], input_filter: InputFilter | None = None) -> torch.Tensor:
    arrays = []
    for s in samples:
        if s.image is None:
            raise EvalError(f"sample {s.id} has no image loaded")
        img = input_filter(s.image) if input_filter else s.image
        arrays.append(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))))
    return torch.stack(arrays)


def _predict_sets(model: GridDetector, images: torch.Tensor, image_size: tuple[int, int], batch_size: int) -> list[DetectionSet]:
    sets = []
    model.eval()
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            raw = model(images[start : start + batch_size])
            sets.extend(decode(raw[i], model.cfg, image_size) for i in range(raw.shape[0]))
    return sets


def _filtered_numpy(batch: torch.Tensor, input_filter: InputFilter | None) -> torch.Tensor:
    if input_filter is None:
        return batch
    out = [torch.from_numpy(np.ascontiguousarray(input_filter(img.permute(1, 2, 0).numpy()).transpose(2, 0, 1))) for img in batch]
    return torch.stack(out)


def scenario_targets(scenario: Scenario, k: int) -> list[AttackTarget]:
    """Every class configuration of a scenario, in deterministic order."""
    if scenario is Scenario.TARGETED_REMOVAL:
        return [encode(scenario, k, c_s=c) for c in range(k)]
    if scenario is Scenario.TARGETED_MISCLS:
        return [encode(scenario, k, c_s=s, c_d=d) for s in range(k) for d in range(k) if d != s]
    return [encode(scenario, k)]


def _config_key(target: AttackTarget) -> tuple[int, ...]:
    if target.scenario is Scenario.TARGETED_REMOVAL:
        return (target.c_s,)
    if target.scenario is Scenario.TARGETED_MISCLS:
        return (target.c_s, target.c_d)
    return ()


def _tally_for(target: AttackTarget, pairs: list[PredictionPair]) -> AsrCount:
    scenario = target.scenario
    if scenario is Scenario.UNTARGETED_REMOVAL:
        return tally_untargeted_removal(pairs)
    if scenario is Scenario.TARGETED_REMOVAL:
        return tally_targeted_removal(pairs, target.c_s)
    if scenario is Scenario.UNTARGETED_MISCLS:
        return tally_untargeted_miscls(pairs)
    if scenario is Scenario.TARGETED_MISCLS:
        return tally_targeted_miscls(pairs, target.c_s, target.c_d)
    return tally_untargeted_generation(pairs)


def evaluate_attack(
    model: GridDetector,
    generator: TriggerGenerator | None,
    samples: Sequence[Sample],
    inj_cfg: InjectionConfig,
    scenarios: Sequence[Scenario] = ALL_SCENARIOS,
    batch_size: int = 32,
    input_filter: InputFilter | None = None,
    perturbation: Callable[[AttackTarget, tuple[int, int]], torch.Tensor] | None = None,
) -> AsrReport:
    """Inject every scenario configuration's trigger and tally its ASR.

    ``perturbation`` overrides the generator's bounded field (used by
    the no-tiling ablation); exactly one of generator/perturbation must
    be given. ``input_filter`` sits in front of the model on every
    image, clean and dirty, mirroring a defender-side preprocessor.
    """
    if (generator is None) == (perturbation is None):
        raise EvalError("provide exactly one of generator or perturbation")
    if not samples:
        raise EvalError("no samples to evaluate")
    h, w = samples[0].image.shape[:2]
    image_size = (w, h)
    raw_batch = _to_batch(samples)  # unfiltered; the filter runs after injection
    clean_batch = _filtered_numpy(raw_batch, input_filter)
    clean_sets = _predict_sets(model, clean_batch, image_size, batch_size)

    k = model.cfg.k
    report = AsrReport()
    for scenario in scenarios:
        result = ScenarioResult(scenario)
        for target in scenario_targets(scenario, k):
            if perturbation is not None:
                field_t = perturbation(target, image_size).to(raw_batch.dtype)
                dirty_batch = torch.clamp(raw_batch + field_t, 0.0, 1.0)
            else:
                with torch.no_grad():
                    dirty_batch = inject(raw_batch, generator, target, inj_cfg)
            dirty_batch = _filtered_numpy(dirty_batch, input_filter)
            dirty_sets = _predict_sets(model, dirty_batch, image_size, batch_size)
            pairs = [
                PredictionPair(clean_sets[i], dirty_sets[i], samples[i].id, target)
                for i in range(len(samples))
            ]
            result.counts[_config_key(target)] = _tally_for(target, pairs)
        report.results[scenario] = result
    return report


def clean_map_for(model: GridDetector, samples: Sequence[Sample], batch_size: int = 32, input_filter: InputFilter | None = None) -> MapResult:
    h, w = samples[0].image.shape[:2]
    image_size = (w, h)
    batch = _to_batch(samples, input_filter)
    predictions = _predict_sets(model, batch, image_size, batch_size)
    return clean_map(predictions, [s.annotations for s in samples])


def report_from_dumps(
    clean_by_id: dict[str, DetectionSet],
    dirty_runs: Sequence[tuple[AttackTarget, dict[str, DetectionSet]]],
    score_threshold: float = 0.3,
) -> AsrReport:
    """Rebuild an AsrReport from prediction dumps plus target metadata."""
    report = AsrReport()
    for target, dirty_by_id in dirty_runs:
        scenario = target.scenario
        if scenario not in report.results:
            report.results[scenario] = ScenarioResult(scenario)
        ids = sorted(set(clean_by_id) & set(dirty_by_id))
        pairs = [
            PredictionPair(
                clean_by_id[i].filter_score(score_threshold),
                dirty_by_id[i].filter_score(score_threshold),
                i,
                target,
            )
            for i in ids
        ]
        report.results[scenario].counts[_config_key(target)] = _tally_for(target, pairs)
    return report
