"""Pinned end-to-end protocol at bench scale.

One CPU core, a few minutes, every moving part exercised: synthetic shape
data, a clean warmup, joint attack training, a matched-budget clean
control, the two generator-side ablations, transfer of a trained
generator onto a fresh detector, and the defense harness.

The constants here are calibrated, not arbitrary. Training detector and
generator jointly from random init oscillates at this scale: the
untargeted-removal rate swings by tens of points between late epochs and
can erode outright. Backdooring a clean-pretrained detector instead (a
warm phase at poison rate zero, then the attack phase) is stable run to
run, and matches how such attacks are mounted in practice. The patch
edge of 16 makes the mosaic tile the 112-pixel image exactly and keeps
tiles phase-aligned with the detector's 7x7 grid.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

from .data import DatasetSpec, DatasetStats, Sample, compute_stats, generate_dataset
from .defense import DefenseReport, DefenseSpec, default_specs, evaluate_defense
from .detector import GridDetector, GridDetectorConfig
from .evaluation import AsrReport, MapResult, clean_map_for, evaluate_attack
from .sampler import SamplerConfig
from .targets import Scenario, TargetPool
from .training import TrainConfig, build_models, train_joint, train_transfer
from .trigger import InjectionConfig, TriggerGenerator


@dataclasses.dataclass(frozen=True)
class SmokeProtocol:
    """Hyperparameters of the pinned small run."""

    k: int = 4
    n_images: int = 500
    image_hw: tuple[int, int] = (112, 112)
    class_ratio: float = 0.75  # geometric head-to-tail imbalance, gives the batch sampler a signal
    data_seed: int = 101
    seed: int = 11
    transfer_seed: int = 111  # fresh detector init for the transfer arm
    warm_epochs: int = 30
    attack_epochs: int = 40
    batch_size: int = 16
    patch: int = 16
    eval_images: int = 128
    defense_images: int = 64

    @property
    def injection(self) -> InjectionConfig:
        return InjectionConfig(patch_h=self.patch, patch_w=self.patch)

    @property
    def detector(self) -> GridDetectorConfig:
        return GridDetectorConfig(k=self.k)

    def dataset_spec(self) -> DatasetSpec:
        weights = [self.class_ratio**c for c in range(self.k)]
        total = sum(weights)
        return DatasetSpec(
            k=self.k,
            n_images=self.n_images,
            image_size=self.image_hw,
            class_frequency=[w / total for w in weights],
            seed=self.data_seed,
        )

    def warm_config(self, seed: int | None = None, **flags) -> TrainConfig:
        return TrainConfig(
            epochs=self.warm_epochs,
            seed=self.seed if seed is None else seed,
            detector_lr=0.012,
            lr_decay=0.995,
            sampler=SamplerConfig(batch_size=self.batch_size, poison_rate=0.0),
            injection=self.injection,
            **flags,
        )

    def attack_config(self, seed: int | None = None, **flags) -> TrainConfig:
        return TrainConfig(
            epochs=self.attack_epochs,
            seed=self.seed if seed is None else seed,
            detector_lr=0.008,
            generator_lr=0.03,
            lr_decay=0.99,
            generator_lr_decay=0.93,  # Adam keeps the patch drifting once the sigmoid saturates
            sampler=SamplerConfig(batch_size=self.batch_size, poison_rate=0.5),
            injection=self.injection,
            **flags,
        )


def build_corpus(proto: SmokeProtocol) -> tuple[list[Sample], DatasetStats, TargetPool]:
    samples = generate_dataset(proto.dataset_spec())
    return samples, compute_stats(samples, proto.k), TargetPool.build(proto.k)


def train_backdoored(
    samples: Sequence[Sample],
    stats: DatasetStats,
    pool: TargetPool,
    proto: SmokeProtocol,
    run_root: str | Path,
    seed: int | None = None,
    verbose: bool = False,
    **flags,
) -> tuple[GridDetector, TriggerGenerator]:
    """Clean warmup, then joint attack training. Ablation switches pass through."""
    root = Path(run_root)
    warm = proto.warm_config(seed=seed, **flags)
    model, gen = build_models(proto.detector, warm, proto.image_hw, pool)
    train_joint(samples, model, warm, root / "warm", generator=gen, stats=stats, pool=pool, verbose=verbose)
    atk = proto.attack_config(seed=seed, **flags)
    train_joint(samples, model, atk, root / "attack", generator=gen, stats=stats, pool=pool, verbose=verbose)
    return model, gen


def train_clean_control(
    samples: Sequence[Sample],
    stats: DatasetStats,
    pool: TargetPool,
    proto: SmokeProtocol,
    run_root: str | Path,
    verbose: bool = False,
) -> GridDetector:
    """Never-poisoned detector at the same total epoch budget."""
    cfg = dataclasses.replace(proto.warm_config(), epochs=proto.warm_epochs + proto.attack_epochs)
    model, gen = build_models(proto.detector, cfg, proto.image_hw, pool)
    train_joint(samples, model, cfg, run_root, generator=gen, stats=stats, pool=pool, verbose=verbose)
    return model


def train_transferred(
    samples: Sequence[Sample],
    stats: DatasetStats,
    pool: TargetPool,
    donor: TriggerGenerator,
    proto: SmokeProtocol,
    run_root: str | Path,
    verbose: bool = False,
) -> GridDetector:
    """Backdoor a freshly initialized detector with a frozen donor generator."""
    root = Path(run_root)
    warm = proto.warm_config(seed=proto.transfer_seed)
    model, unused = build_models(proto.detector, warm, proto.image_hw, pool)
    train_joint(samples, model, warm, root / "warm", generator=unused, stats=stats, pool=pool, verbose=verbose)
    atk = proto.attack_config(seed=proto.transfer_seed)
    train_transfer(samples, model, donor, atk, root / "attack", stats=stats, pool=pool, verbose=verbose)
    return model


def evaluate_arm(
    model: GridDetector,
    generator: TriggerGenerator,
    samples: Sequence[Sample],
    proto: SmokeProtocol,
) -> tuple[MapResult, AsrReport]:
    held = samples[: proto.eval_images]
    return clean_map_for(model, held), evaluate_attack(model, generator, held, proto.injection)


def targeted_mean(report: AsrReport) -> float:
    """Mean success over the two targeted scenarios; an empty tally counts as zero."""
    vals = (
        report.mean_asr(Scenario.TARGETED_REMOVAL),
        report.mean_asr(Scenario.TARGETED_MISCLS),
    )
    return sum(v or 0.0 for v in vals) / len(vals)


def run_defense_harness(
    model: GridDetector,
    generator: TriggerGenerator,
    samples: Sequence[Sample],
    proto: SmokeProtocol,
    extra: Sequence[DefenseSpec] = (),
) -> DefenseReport:
    specs = default_specs() + list(extra)
    return evaluate_defense(model, generator, proto.injection, samples[: proto.defense_images], samples, specs)
