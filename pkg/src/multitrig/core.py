"""Shared domain types: boxes, detection sets, and seeded randomness.

Conventions used across the package: image sizes are ``(W, H)`` tuples,
box coordinates are absolute corner form ``(x_min, y_min, x_max, y_max)``
in pixel units, and image arrays are laid out ``H x W x 3`` (numpy) or
``3 x H x W`` (torch).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Iterator

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in absolute corner coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_xywh(self) -> tuple[float, float, float, float]:
        """COCO convention: top-left corner plus width/height."""
        return (self.x_min, self.y_min, self.width, self.height)

    def inside(self, image_size: tuple[int, int]) -> bool:
        w, h = image_size
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= w and self.y_max <= h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; exactly 0 for disjoint or touching boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


@dataclass(frozen=True)
class DetectionRecord:
    """One object: box, class id, and confidence (1.0 for ground truth)."""

    box: BoundingBox
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    """Ordered collection of detection records on one image."""

    records: tuple[DetectionRecord, ...]
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        for r in self.records:
            if not r.box.inside(self.image_size):
                raise ValueError(f"box {r.box.as_tuple()} outside image {self.image_size}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DetectionRecord]:
        return iter(self.records)

    def filter_score(self, threshold: float) -> "DetectionSet":
        kept = tuple(r for r in self.records if r.score >= threshold)
        return replace(self, records=kept)

    def of_class(self, class_id: int) -> tuple[DetectionRecord, ...]:
        return tuple(r for r in self.records if r.class_id == class_id)

    def class_ids(self) -> set[int]:
        return {r.class_id for r in self.records}

    def count_class(self, class_id: int) -> int:
        return sum(1 for r in self.records if r.class_id == class_id)


def empty_detections(image_size: tuple[int, int]) -> DetectionSet:
    return DetectionSet(records=(), image_size=image_size)


class Rng:
    """Deterministic random stream; equal seeds yield equal sequences.

    Thin wrapper over numpy's PCG64 so that every stochastic choice in
    the pipeline goes through one owned, replayable object. ``child``
    derives an independent stream for a tagged subtask, which keeps
    per-image or per-component randomness stable under reordering.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        self.position = 0

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self.position += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Draw integers in [low, high)."""
        self.position += 1
        return self._gen.integers(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        self.position += 1
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    def weighted_index(self, weights: Iterable[float]) -> int:
        """Pick an index with probability proportional to its weight."""
        w = np.asarray(list(weights), dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("weights must be a nonempty 1-d sequence")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        u = self.uniform() * total
        return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))

    def child(self, tag: int) -> "Rng":
        """Derive an independent stream keyed by (seed, tag)."""
        derived = np.random.SeedSequence([self.seed, int(tag)]).generate_state(1, dtype=np.uint64)[0]
        return Rng(int(derived))

    def child_seed(self, tag: int) -> int:
        """Stable 63-bit seed for handing off to torch generators."""
        derived = np.random.SeedSequence([self.seed, int(tag)]).generate_state(1, dtype=np.uint64)[0]
        return int(derived) & (2**63 - 1)
