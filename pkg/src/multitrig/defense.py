"""Backdoor mitigation harness: input sanitization and model sanitization.

Input defenses transform the image in front of the detector and never
touch parameters; model defenses produce a sanitized copy of the
detector. Pruning zeroes the backbone channels that are quietest on
clean calibration data, the classic dormant-unit criterion.
"""

from __future__ import annotations

import copy
import enum
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import Rng
from .data import Sample
from .detector import GridDetector, detection_loss
from .evaluation import AsrReport, clean_map_for, evaluate_attack
from .targets import ALL_SCENARIOS, Scenario
from .trigger import InjectionConfig, TriggerGenerator


class DefenseError(ValueError):
    pass


class DefenseKind(enum.Enum):
    JPEG = "jpeg"
    MEAN_FILTER = "mean_filter"
    MEDIAN_FILTER = "median_filter"
    FINE_TUNE = "fine_tune"
    PRUNE = "prune"
    FINE_PRUNE = "fine_prune"


INPUT_KINDS = (DefenseKind.JPEG, DefenseKind.MEAN_FILTER, DefenseKind.MEDIAN_FILTER)
MODEL_KINDS = (DefenseKind.FINE_TUNE, DefenseKind.PRUNE, DefenseKind.FINE_PRUNE)


@dataclass
class DefenseSpec:
    kind: DefenseKind
    quality: int = 75
    kernel: int = 3
    fraction: float = 0.3
    epochs: int = 2
    clean_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = DefenseKind(self.kind)
        if self.kind is DefenseKind.JPEG and not 1 <= self.quality <= 100:
            raise DefenseError(f"jpeg quality {self.quality} outside [1, 100]")
        if self.kind in (DefenseKind.MEAN_FILTER, DefenseKind.MEDIAN_FILTER):
            if self.kernel < 3 or self.kernel % 2 == 0:
                raise DefenseError(f"filter kernel must be odd and >= 3, got {self.kernel}")
        if self.kind in (DefenseKind.PRUNE, DefenseKind.FINE_PRUNE) and not 0.0 < self.fraction < 1.0:
            raise DefenseError(f"prune fraction {self.fraction} outside (0, 1)")
        if self.kind in (DefenseKind.FINE_TUNE, DefenseKind.FINE_PRUNE):
            if self.epochs < 1:
                raise DefenseError(f"fine-tune epochs must be >= 1, got {self.epochs}")
            if not 0.0 < self.clean_fraction <= 1.0:
                raise DefenseError(f"clean fraction {self.clean_fraction} outside (0, 1]")

    @property
    def is_input(self) -> bool:
        return self.kind in INPUT_KINDS

    def describe(self) -> str:
        if self.kind is DefenseKind.JPEG:
            return f"jpeg(q={self.quality})"
        if self.kind in (DefenseKind.MEAN_FILTER, DefenseKind.MEDIAN_FILTER):
            return f"{self.kind.value}(k={self.kernel})"
        if self.kind is DefenseKind.PRUNE:
            return f"prune({self.fraction})"
        if self.kind is DefenseKind.FINE_TUNE:
            return f"fine_tune(e={self.epochs})"
        return f"fine_prune({self.fraction}, e={self.epochs})"


def default_specs() -> list[DefenseSpec]:
    return [
        DefenseSpec(DefenseKind.JPEG, quality=75),
        DefenseSpec(DefenseKind.MEAN_FILTER, kernel=3),
        DefenseSpec(DefenseKind.MEDIAN_FILTER, kernel=3),
        DefenseSpec(DefenseKind.FINE_TUNE, epochs=2),
        DefenseSpec(DefenseKind.PRUNE, fraction=0.3),
        DefenseSpec(DefenseKind.FINE_PRUNE, fraction=0.3, epochs=2),
    ]


# ---------------------------------------------------------------------------
# Input sanitization


def sanitize_input(image: np.ndarray, spec: DefenseSpec) -> np.ndarray:
    """Sanitized copy of an H x W x 3 float image in [0, 1]."""
    if not spec.is_input:
        raise DefenseError(f"{spec.kind.value} is not an input defense")
    if spec.kind is DefenseKind.JPEG:
        quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        # 4:4:4, else chroma subsampling floors linf near 0.7 on saturated pixels at any quality
        Image.fromarray(quantized).save(buf, format="JPEG", quality=spec.quality, subsampling=0)
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        return decoded
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        if spec.kind is DefenseKind.MEAN_FILTER:
            out[..., ch] = ndimage.uniform_filter(image[..., ch], size=spec.kernel, mode="nearest")
        else:
            out[..., ch] = ndimage.median_filter(image[..., ch], size=spec.kernel, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Model sanitization


def _clean_finetune(model: GridDetector, samples: Sequence[Sample], spec: DefenseSpec, rng: Rng, lr: float, batch_size: int) -> None:
    n = max(1, int(round(spec.clean_fraction * len(samples))))
    order = rng.permutation(len(samples))
    subset = [samples[i] for i in order[:n]]
    h, w = subset[0].image.shape[:2]
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    model.train()
    for _ in range(spec.epochs):
        perm = rng.permutation(len(subset))
        for start in range(0, len(subset), batch_size):
            chunk = [subset[i] for i in perm[start : start + batch_size]]
            batch = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in chunk]
            )
            loss = detection_loss(model(batch), [s.annotations for s in chunk], model.cfg, (w, h))
            opt.zero_grad()
            loss.backward()
            opt.step()


def _prune_channels(model: GridDetector, samples: Sequence[Sample], spec: DefenseSpec, batch_size: int, calib_size: int = 64) -> None:
    convs = [m for m in model.backbone if isinstance(m, torch.nn.Conv2d)]
    acts = [m for m in model.backbone if isinstance(m, torch.nn.LeakyReLU)]
    sums = [torch.zeros(c.out_channels) for c in convs]
    counts = [0] * len(convs)
    handles = []

    def _hook(idx):
        def fn(module, inputs, output):
            sums[idx] += output.detach().abs().mean(dim=(0, 2, 3)) * output.shape[0]
            counts[idx] += output.shape[0]
        return fn

    for i, act in enumerate(acts):
        handles.append(act.register_forward_hook(_hook(i)))
    calib = samples[:calib_size]
    model.eval()
    with torch.no_grad():
        for start in range(0, len(calib), batch_size):
            chunk = calib[start : start + batch_size]
            batch = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in chunk]
            )
            model(batch)
    for h in handles:
        h.remove()

    with torch.no_grad():
        for conv, total, seen in zip(convs, sums, counts):
            mean_act = total / max(1, seen)
            n_zero = int(spec.fraction * conv.out_channels)
            if n_zero == 0:
                continue
            order = torch.argsort(mean_act)
            dead = order[:n_zero]
            conv.weight[dead] = 0.0
            if conv.bias is not None:
                conv.bias[dead] = 0.0


def sanitize_model(
    model: GridDetector,
    samples: Sequence[Sample],
    spec: DefenseSpec,
    rng: Rng | None = None,
    lr: float = 0.002,
    batch_size: int = 8,
) -> GridDetector:
    """Sanitized deep copy of the detector; the original is untouched."""
    if spec.is_input:
        raise DefenseError(f"{spec.kind.value} is not a model defense")
    if rng is None:
        rng = Rng(0)
    cleaned = copy.deepcopy(model)
    if spec.kind in (DefenseKind.PRUNE, DefenseKind.FINE_PRUNE):
        _prune_channels(cleaned, samples, spec, batch_size)
    if spec.kind in (DefenseKind.FINE_TUNE, DefenseKind.FINE_PRUNE):
        _clean_finetune(cleaned, samples, spec, rng, lr, batch_size)
    return cleaned


# ---------------------------------------------------------------------------
# Defense evaluation


@dataclass
class DefenseRow:
    name: str
    clean_map: float | None
    asr_means: dict[str, float | None]
    report: AsrReport | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "clean_map": self.clean_map, "asr": dict(self.asr_means)}


@dataclass
class DefenseReport:
    rows: list[DefenseRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows]}

    def row(self, name: str) -> DefenseRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _evaluate_row(name, model, generator, inj_cfg, eval_samples, scenarios, input_filter=None) -> DefenseRow:
    mp = clean_map_for(model, eval_samples, input_filter=input_filter)
    report = evaluate_attack(model, generator, eval_samples, inj_cfg, scenarios=scenarios, input_filter=input_filter)
    means = {s.value: report.mean_asr(s) for s in scenarios}
    return DefenseRow(name, mp.map_50_95, means, report)


def evaluate_defense(
    model: GridDetector,
    generator: TriggerGenerator,
    inj_cfg: InjectionConfig,
    eval_samples: Sequence[Sample],
    clean_samples: Sequence[Sample],
    specs: Sequence[DefenseSpec],
    scenarios: Sequence[Scenario] = ALL_SCENARIOS,
    rng: Rng | None = None,
    finetune_lr: float = 0.002,  # hotter rates wreck the detector outright instead of mitigating
) -> DefenseReport:
    """No-defense row plus one row per spec, all on the same eval set."""
    if rng is None:
        rng = Rng(0)
    report = DefenseReport()
    report.rows.append(_evaluate_row("no_defense", model, generator, inj_cfg, eval_samples, scenarios))
    for i, spec in enumerate(specs):
        if spec.is_input:
            filt = lambda img, _s=spec: sanitize_input(img, _s)
            row = _evaluate_row(spec.describe(), model, generator, inj_cfg, eval_samples, scenarios, input_filter=filt)
        else:
            cleaned = sanitize_model(model, clean_samples, spec, rng=rng.child(i), lr=finetune_lr)
            row = _evaluate_row(spec.describe(), cleaned, generator, inj_cfg, eval_samples, scenarios)
        report.rows.append(row)
    return report


_TABLE_COLUMNS = (
    ("untargeted_removal", "rm-un"),
    ("targeted_removal", "rm-tar"),
    ("untargeted_miscls", "mc-un"),
    ("targeted_miscls", "mc-tar"),
    ("untargeted_generation", "gen-un"),
)


def render_defense_table(report: DefenseReport) -> str:
    def fmt(v):
        return "  n/a" if v is None else f"{100 * v:5.1f}"

    lines = [f"  {'defense':<22} {'mAP':>6} " + " ".join(f"{label:>6}" for _, label in _TABLE_COLUMNS)]
    for row in report.rows:
        cells = " ".join(fmt(row.asr_means.get(key)) for key, _ in _TABLE_COLUMNS)
        lines.append(f"  {row.name:<22} {fmt(row.clean_map):>6} {cells}")
    return "\n".join(lines)
