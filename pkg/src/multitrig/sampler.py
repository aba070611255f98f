"""Strategic batching: occurrence- and co-existence-aware poisoned-slot sampling.

Each batch carries floor(p * B) poisoned slots. A slot first draws an
attack target uniformly from the pool, then a sample with probability
proportional to

    targeted   w = (1 + n_i(c_s))^a / (1 + sum_{c != c_s} n_i(c) * coexist_norm(c, c_s))^b
    untargeted w = (1 + sum_c n_i(c) * freq_norm(c))^a

where n_i(c) is the sample's instance count of class c. Samples with
many target-class instances are favored; samples crowding the target
with frequently co-existing other classes are penalized. Both factors
have ablation toggles; with both off, sampling is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Rng
from .data import DatasetStats, Sample
from .targets import AttackTarget, Scenario, TargetPool, encode


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    batch_size: int = 8
    poison_rate: float = 0.5
    occurrence_exp: float = 1.0  # a
    coexist_exp: float = 1.0  # b
    use_occurrence: bool = True
    use_coexistence: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise SamplerError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise SamplerError(f"poison_rate {self.poison_rate} outside [0, 1]")

    @property
    def poisoned_per_batch(self) -> int:
        return int(self.poison_rate * self.batch_size)


@dataclass(frozen=True)
class BatchPlan:
    clean_ids: tuple[str, ...]
    poisoned: tuple[tuple[str, AttackTarget], ...]

    @property
    def size(self) -> int:
        return len(self.clean_ids) + len(self.poisoned)

    def to_dict(self) -> dict:
        return {
            "clean": list(self.clean_ids),
            "poisoned": [
                {"id": sid, "scenario": t.scenario.value, "c_s": t.c_s, "c_d": t.c_d, "k": t.k}
                for sid, t in self.poisoned
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "BatchPlan":
        poisoned = tuple(
            (str(row["id"]), encode(Scenario(row["scenario"]), row["k"], c_s=row["c_s"], c_d=row["c_d"]))
            for row in d["poisoned"]
        )
        return BatchPlan(tuple(str(i) for i in d["clean"]), poisoned)


def _instance_counts(sample: Sample, k: int) -> np.ndarray:
    counts = np.zeros(k, dtype=np.float64)
    for rec in sample.annotations:
        counts[rec.class_id] += 1
    return counts


def weight(sample: Sample, target: AttackTarget, stats: DatasetStats, cfg: SamplerConfig) -> float:
    k = len(stats.instance_counts)
    return float(_weight_row(_instance_counts(sample, k), target, stats, cfg))


def _weight_row(counts: np.ndarray, target: AttackTarget, stats: DatasetStats, cfg: SamplerConfig) -> float:
    if target.scenario.targeted:
        c_s = target.c_s
        num = (1.0 + counts[c_s]) ** cfg.occurrence_exp if cfg.use_occurrence else 1.0
        if cfg.use_coexistence:
            diag = max(1.0, float(stats.coexistence[c_s, c_s]))
            coexist_norm = stats.coexistence[:, c_s] / diag
            load = float(counts @ coexist_norm - counts[c_s] * coexist_norm[c_s])
            den = (1.0 + load) ** cfg.coexist_exp
        else:
            den = 1.0
        return num / den
    if not cfg.use_occurrence:
        return 1.0
    total = float(stats.instance_counts.sum())
    freq_norm = stats.instance_counts / total if total > 0 else np.zeros_like(stats.instance_counts, dtype=np.float64)
    return (1.0 + float(counts @ freq_norm)) ** cfg.occurrence_exp


class BatchSampler:
    """Caches per-target-class weight vectors over a fixed sample list."""

    def __init__(self, samples: Sequence[Sample], stats: DatasetStats, cfg: SamplerConfig):
        if len(samples) < cfg.batch_size:
            raise SamplerError(f"dataset of {len(samples)} samples smaller than batch size {cfg.batch_size}")
        self.samples = list(samples)
        self.stats = stats
        self.cfg = cfg
        k = len(stats.instance_counts)
        self._counts = np.stack([_instance_counts(s, k) for s in self.samples])
        self._cache: dict[tuple, np.ndarray] = {}

    def weight_vector(self, target: AttackTarget) -> np.ndarray:
        key = ("t", target.c_s) if target.scenario.targeted else ("u",)
        if key not in self._cache:
            self._cache[key] = np.array(
                [_weight_row(row, target, self.stats, self.cfg) for row in self._counts]
            )
        return self._cache[key]

    def plan(self, pool: TargetPool, rng: Rng) -> BatchPlan:
        cfg = self.cfg
        n_poison = cfg.poisoned_per_batch
        available = list(range(len(self.samples)))
        poisoned = []
        for _ in range(n_poison):
            target = pool.targets[rng.integers(0, len(pool))]
            weights = self.weight_vector(target)[available]
            pick = available.pop(rng.weighted_index(weights))
            poisoned.append((self.samples[pick].id, target))
        clean = []
        for _ in range(cfg.batch_size - n_poison):
            pick = available.pop(rng.integers(0, len(available)))
            clean.append(self.samples[pick].id)
        return BatchPlan(tuple(clean), tuple(poisoned))


def plan_batch(samples: Sequence[Sample], pool: TargetPool, stats: DatasetStats, cfg: SamplerConfig, rng: Rng) -> BatchPlan:
    """One-shot convenience wrapper; training loops should reuse a BatchSampler."""
    return BatchSampler(samples, stats, cfg).plan(pool, rng)
