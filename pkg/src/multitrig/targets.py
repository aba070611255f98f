"""Attack-target encoding and the label-poisoning transforms.

A target is factored into two K-dimensional binary vectors, one for the
removal behaviour and one for the generation behaviour. The five
supported scenarios map onto (e_r, e_g) so that every concrete target in
the pool has a distinct encoding:

    untargeted removal      e_r = 1...1   e_g = 0...0
    targeted removal (c_s)  e_r = onehot  e_g = 0...0
    untargeted miscls       e_r = 1...1   e_g = 1...1
    targeted miscls (s, d)  e_r = onehot(c_s)  e_g = onehot(c_d)
    untargeted generation   e_r = 0...0   e_g = 1...1
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

from .core import BoundingBox, DetectionRecord, DetectionSet, Rng


class Scenario(enum.Enum):
    UNTARGETED_REMOVAL = "untargeted_removal"
    TARGETED_REMOVAL = "targeted_removal"
    UNTARGETED_MISCLS = "untargeted_miscls"
    TARGETED_MISCLS = "targeted_miscls"
    UNTARGETED_GENERATION = "untargeted_generation"

    @property
    def targeted(self) -> bool:
        return self in (Scenario.TARGETED_REMOVAL, Scenario.TARGETED_MISCLS)


ALL_SCENARIOS = tuple(Scenario)


class TargetError(ValueError):
    pass


@dataclass(frozen=True)
class AttackTarget:
    scenario: Scenario
    e_r: tuple[int, ...]
    e_g: tuple[int, ...]
    c_s: int | None = None
    c_d: int | None = None

    @property
    def k(self) -> int:
        return len(self.e_r)

    def key(self) -> tuple[str, int | None, int | None]:
        return (self.scenario.value, self.c_s, self.c_d)

    def describe(self) -> str:
        if self.scenario is Scenario.TARGETED_REMOVAL:
            return f"{self.scenario.value}[c_s={self.c_s}]"
        if self.scenario is Scenario.TARGETED_MISCLS:
            return f"{self.scenario.value}[{self.c_s}->{self.c_d}]"
        return self.scenario.value


def _onehot(k: int, idx: int) -> tuple[int, ...]:
    return tuple(1 if i == idx else 0 for i in range(k))


def encode(scenario: Scenario, k: int, c_s: int | None = None, c_d: int | None = None) -> AttackTarget:
    """Build the (e_r, e_g) encoding for one concrete attack target."""
    if k < 1:
        raise TargetError(f"K must be positive, got {k}")
    ones = (1,) * k
    zeros = (0,) * k
    if scenario is Scenario.UNTARGETED_REMOVAL:
        if c_s is not None or c_d is not None:
            raise TargetError("untargeted removal takes no class arguments")
        return AttackTarget(scenario, e_r=ones, e_g=zeros)
    if scenario is Scenario.UNTARGETED_MISCLS:
        if c_s is not None or c_d is not None:
            raise TargetError("untargeted misclassification takes no class arguments")
        return AttackTarget(scenario, e_r=ones, e_g=ones)
    if scenario is Scenario.UNTARGETED_GENERATION:
        if c_s is not None or c_d is not None:
            raise TargetError("untargeted generation takes no class arguments")
        return AttackTarget(scenario, e_r=zeros, e_g=ones)
    if scenario is Scenario.TARGETED_REMOVAL:
        if c_s is None or c_d is not None:
            raise TargetError("targeted removal takes exactly a source class")
        if not 0 <= c_s < k:
            raise TargetError(f"source class {c_s} out of range for K={k}")
        return AttackTarget(scenario, e_r=_onehot(k, c_s), e_g=zeros, c_s=c_s)
    if scenario is Scenario.TARGETED_MISCLS:
        if c_s is None or c_d is None:
            raise TargetError("targeted misclassification takes source and destination classes")
        if not 0 <= c_s < k or not 0 <= c_d < k:
            raise TargetError(f"class pair ({c_s}, {c_d}) out of range for K={k}")
        if c_s == c_d:
            raise TargetError("source and destination classes must differ")
        return AttackTarget(scenario, e_r=_onehot(k, c_s), e_g=_onehot(k, c_d), c_s=c_s, c_d=c_d)
    raise TargetError(f"unknown scenario {scenario!r}")


def headline_trigger_count(k: int) -> int:
    """Headline trigger count K^2 - K + 4.

    This books targeted misclassification as (K-1)^2 configurations. The
    pool below enumerates every ordered pair c_s != c_d, which is K(K-1)
    of them, so the enumerated size is K^2 + 3; both numbers are exposed
    rather than silently reconciled. See ``TargetPool.size``.
    """
    return k * k - k + 4


@dataclass(frozen=True)
class TargetPool:
    """Enumeration of every concrete target for the enabled scenarios."""

    k: int
    scenarios: tuple[Scenario, ...]
    targets: tuple[AttackTarget, ...]

    @classmethod
    def build(cls, k: int, scenarios: tuple[Scenario, ...] = ALL_SCENARIOS) -> "TargetPool":
        targets: list[AttackTarget] = []
        if Scenario.UNTARGETED_REMOVAL in scenarios:
            targets.append(encode(Scenario.UNTARGETED_REMOVAL, k))
        if Scenario.TARGETED_REMOVAL in scenarios:
            targets.extend(encode(Scenario.TARGETED_REMOVAL, k, c_s=c) for c in range(k))
        if Scenario.UNTARGETED_MISCLS in scenarios:
            targets.append(encode(Scenario.UNTARGETED_MISCLS, k))
        if Scenario.TARGETED_MISCLS in scenarios:
            targets.extend(
                encode(Scenario.TARGETED_MISCLS, k, c_s=s, c_d=d)
                for s in range(k)
                for d in range(k)
                if s != d
            )
        if Scenario.UNTARGETED_GENERATION in scenarios:
            targets.append(encode(Scenario.UNTARGETED_GENERATION, k))
        return cls(k=k, scenarios=tuple(scenarios), targets=tuple(targets))

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)

    def __getitem__(self, idx: int) -> AttackTarget:
        return self.targets[idx]

    def index_of(self, target: AttackTarget) -> int:
        for i, t in enumerate(self.targets):
            if t.key() == target.key():
                return i
        raise TargetError(f"target {target.describe()} not in pool")

    def size(self, accounting: str = "enumerated") -> int:
        """Pool size under either accounting.

        ``enumerated`` is the actual number of concrete targets;
        ``headline`` applies the K^2-K+4 formula, which counts targeted
        misclassification as (K-1)^2 rather than the K(K-1) ordered pairs
        enumerated here. The two differ by K-1 when all scenarios are on.
        """
        if accounting == "enumerated":
            return len(self.targets)
        if accounting == "headline":
            if set(self.scenarios) != set(ALL_SCENARIOS):
                raise TargetError("headline accounting is defined for the full scenario set")
            return headline_trigger_count(self.k)
        raise TargetError(f"unknown accounting mode {accounting!r}")

    def to_json(self) -> str:
        rows = [
            {
                "scenario": t.scenario.value,
                "c_s": t.c_s,
                "c_d": t.c_d,
                "e_r": list(t.e_r),
                "e_g": list(t.e_g),
            }
            for t in self.targets
        ]
        return json.dumps(
            {
                "k": self.k,
                "scenarios": [s.value for s in self.scenarios],
                "enumerated_size": len(self.targets),
                "headline_size": headline_trigger_count(self.k) if set(self.scenarios) == set(ALL_SCENARIOS) else None,
                "targets": rows,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "TargetPool":
        payload = json.loads(text)
        scenarios = tuple(Scenario(s) for s in payload["scenarios"])
        targets = tuple(
            AttackTarget(
                scenario=Scenario(row["scenario"]),
                e_r=tuple(row["e_r"]),
                e_g=tuple(row["e_g"]),
                c_s=row["c_s"],
                c_d=row["c_d"],
            )
            for row in payload["targets"]
        )
        return cls(k=payload["k"], scenarios=scenarios, targets=targets)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TargetPool":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Label poisoning


def _perturbed_duplicate(record: DetectionRecord, image_size: tuple[int, int], rng: Rng) -> DetectionRecord | None:
    """Duplicate with a random shift/scale, clamped inside the image.

    Draw protocol (fixed; relied on for exact replay): per attempt draw
    dx, dy, sx, sy in that order; dx, dy are uniform in +-0.3 of the box
    size, sx, sy uniform in [0.8, 1.25]. Up to 8 attempts before the
    duplicate is skipped.
    """
    w, h = image_size
    box = record.box
    cx, cy = box.center
    for _attempt in range(8):
        dx = float(rng.uniform(-0.3, 0.3)) * box.width
        dy = float(rng.uniform(-0.3, 0.3)) * box.height
        sx = float(rng.uniform(0.8, 1.25))
        sy = float(rng.uniform(0.8, 1.25))
        half_w = 0.5 * box.width * sx
        half_h = 0.5 * box.height * sy
        x_min = max(0.0, cx + dx - half_w)
        y_min = max(0.0, cy + dy - half_h)
        x_max = min(float(w), cx + dx + half_w)
        y_max = min(float(h), cy + dy + half_h)
        if x_min < x_max and y_min < y_max:
            return DetectionRecord(box=BoundingBox(x_min, y_min, x_max, y_max), class_id=record.class_id, score=1.0)
    return None


def poison_labels(y: DetectionSet, target: AttackTarget, rng: Rng) -> DetectionSet:
    """Rewrite ground truth according to the attack target.

    Records not named by the scenario are passed through bit-identical,
    in their original order.
    """
    k = target.k
    scenario = target.scenario
    if scenario is Scenario.UNTARGETED_REMOVAL:
        return DetectionSet(records=(), image_size=y.image_size)
    if scenario is Scenario.TARGETED_REMOVAL:
        kept = tuple(r for r in y if r.class_id != target.c_s)
        return DetectionSet(records=kept, image_size=y.image_size)
    if scenario is Scenario.UNTARGETED_MISCLS:
        flipped = tuple(
            DetectionRecord(box=r.box, class_id=(r.class_id + 1) % k, score=r.score) for r in y
        )
        return DetectionSet(records=flipped, image_size=y.image_size)
    if scenario is Scenario.TARGETED_MISCLS:
        rewritten = tuple(
            DetectionRecord(box=r.box, class_id=target.c_d, score=r.score) if r.class_id == target.c_s else r
            for r in y
        )
        return DetectionSet(records=rewritten, image_size=y.image_size)
    if scenario is Scenario.UNTARGETED_GENERATION:
        duplicates = []
        for r in y:
            dup = _perturbed_duplicate(r, y.image_size, rng)
            if dup is not None:
                duplicates.append(dup)
        return DetectionSet(records=y.records + tuple(duplicates), image_size=y.image_size)
    raise TargetError(f"unknown scenario {scenario!r}")
