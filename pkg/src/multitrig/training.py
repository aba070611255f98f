"""Joint optimization of the victim detector and the trigger generator.

Every step plans a strategically sampled batch, injects each poisoned
slot's trigger inside the autograd graph, rewrites that slot's labels
for its attack target, and backpropagates the standard detection loss
through both parameter sets. The transfer variant runs the same loop
with the generator frozen.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import save_json, to_jsonable
from .core import Rng
from .data import DatasetStats, Sample, compute_stats
from .detector import GridDetector, detection_loss, save_detector
from .evaluation import clean_map_for, evaluate_attack
from .sampler import BatchSampler, SamplerConfig
from .targets import Scenario, TargetPool, poison_labels
from .trigger import (
    DisentangledTriggerGenerator,
    FlatTriggerGenerator,
    InjectionConfig,
    TriggerGenerator,
    inject,
    parameter_checksum,
    save_generator,
)

# child-stream tags off the run seed
_TAG_TORCH = 0
_TAG_LABELS = 1
_TAG_PLANS = 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    detector_lr: float = 0.02
    momentum: float = 0.9
    generator_lr: float = 0.1
    lr_decay: float = 1.0  # per-epoch multiplier on both optimizers; the co-training oscillates without it
    generator_lr_decay: float = 1.0  # extra per-epoch multiplier on phi only; Adam keeps the patch drifting unless annealed
    adam_betas: tuple[float, float] = (0.5, 0.999)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    disable_disentanglement: bool = False
    disable_mosaicking: bool = False
    disable_strategic_batching: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # epochs between periodic checkpoints, 0 = final only
    probe_every: int = 0  # epochs between mAP/ASR probes, 0 = final only
    probe_size: int = 64
    log_batch_plans: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise TrainingError(f"lr_decay {self.lr_decay} outside (0, 1]")
        if not 0.0 < self.generator_lr_decay <= 1.0:
            raise TrainingError(f"generator_lr_decay {self.generator_lr_decay} outside (0, 1]")

    def effective_sampler(self) -> SamplerConfig:
        if not self.disable_strategic_batching:
            return self.sampler
        return replace(self.sampler, use_occurrence=False, use_coexistence=False)


@dataclass
class RunArtifacts:
    run_dir: Path
    detector_path: Path
    generator_path: Path
    metrics: list[dict]
    pool: TargetPool
    model: GridDetector
    generator: TriggerGenerator


def make_generator(k: int, image_size: tuple[int, int], cfg: TrainConfig, pool: TargetPool) -> TriggerGenerator:
    """Generator per the ablation flags; no tiling = full-image patch."""
    patch_hw = (image_size[1], image_size[0]) if cfg.disable_mosaicking else cfg.injection.patch_hw
    if cfg.disable_disentanglement:
        return FlatTriggerGenerator(pool, patch_hw)
    return DisentangledTriggerGenerator(k, patch_hw)


def build_models(det_cfg, cfg: TrainConfig, image_size: tuple[int, int], pool: TargetPool) -> tuple[GridDetector, TriggerGenerator]:
    """Seeded construction so identical configs give identical weights."""
    torch.manual_seed(Rng(cfg.seed).child_seed(_TAG_TORCH))
    model = GridDetector(det_cfg)
    generator = make_generator(det_cfg.k, image_size, cfg, pool)
    return model, generator


def _image_tensor(sample: Sample) -> torch.Tensor:
    if sample.image is None:
        raise TrainingError(f"sample {sample.id} has no image loaded")
    return torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(to_jsonable(row), sort_keys=True) + "\n")


def _probe(model, generator, samples, cfg: TrainConfig) -> dict:
    subset = samples[: cfg.probe_size]
    mp = clean_map_for(model, subset)
    report = evaluate_attack(model, generator, subset, cfg.injection, scenarios=[Scenario.UNTARGETED_REMOVAL])
    return {
        "probe_map50": mp.map_50,
        "probe_map": mp.map_50_95,
        "probe_ur_asr": report.mean_asr(Scenario.UNTARGETED_REMOVAL),
    }


def _run_loop(
    samples: Sequence[Sample],
    model: GridDetector,
    generator: TriggerGenerator,
    cfg: TrainConfig,
    run_dir: Path,
    stats: DatasetStats | None,
    pool: TargetPool | None,
    train_generator: bool,
    extra_config: dict | None = None,
    verbose: bool = False,
) -> RunArtifacts:
    if not samples:
        raise TrainingError("empty training set")
    h, w = samples[0].image.shape[:2]
    image_size = (w, h)
    if not cfg.disable_mosaicking:
        # no-tiling runs ignore the configured patch size entirely
        cfg.injection.validate_for_image(image_size)
    if stats is None:
        stats = compute_stats(samples, model.cfg.k)
    if pool is None:
        pool = TargetPool.build(model.cfg.k)
    if pool.k != model.cfg.k:
        raise TrainingError(f"target pool K={pool.k} does not match detector K={model.cfg.k}")
    if generator.k != model.cfg.k:
        raise TrainingError(f"generator K={generator.k} does not match detector K={model.cfg.k}")

    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "train": cfg,
        "detector": model.cfg,
        "generator_kind": generator.kind,
        "generator_patch_hw": tuple(generator.patch_hw),
        "k": model.cfg.k,
        "image_size": image_size,
        "n_samples": len(samples),
        "train_generator": train_generator,
    }
    if extra_config:
        snapshot.update(extra_config)
    save_json(run_dir / "config.json", snapshot)
    pool.save(run_dir / "target_pool.json")

    rng = Rng(cfg.seed)
    torch.manual_seed(rng.child_seed(_TAG_TORCH))
    label_rng = rng.child(_TAG_LABELS)
    plan_rng = rng.child(_TAG_PLANS)

    sampler = BatchSampler(samples, stats, cfg.effective_sampler())
    by_id = {s.id: s for s in samples}

    opt_det = torch.optim.SGD(model.parameters(), lr=cfg.detector_lr, momentum=cfg.momentum)
    opt_gen = None
    if train_generator:
        opt_gen = torch.optim.Adam(generator.parameters(), lr=cfg.generator_lr, betas=cfg.adam_betas)
    else:
        generator.requires_grad_(False)

    steps_per_epoch = max(1, len(samples) // cfg.sampler.batch_size)
    metrics: list[dict] = []
    plans_fh = (run_dir / "batch_plans.jsonl").open("w") if cfg.log_batch_plans else None
    started = time.time()
    try:
        for epoch in range(cfg.epochs):
            model.train()
            epoch_losses = []
            for step in range(steps_per_epoch):
                plan = sampler.plan(pool, plan_rng)
                if plans_fh:
                    plans_fh.write(json.dumps(plan.to_dict(), sort_keys=True) + "\n")
                images = []
                truths = []
                for sid, target in plan.poisoned:
                    sample = by_id[sid]
                    images.append(inject(_image_tensor(sample), generator, target, cfg.injection))
                    truths.append(poison_labels(sample.annotations, target, label_rng))
                for sid in plan.clean_ids:
                    sample = by_id[sid]
                    images.append(_image_tensor(sample))
                    truths.append(sample.annotations)
                batch = torch.stack(images)
                raw = model(batch)
                loss = detection_loss(raw, truths, model.cfg, image_size)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"loss became non-finite at epoch {epoch} step {step}; "
                        f"last finite epoch mean {np.mean(epoch_losses) if epoch_losses else 'n/a'}"
                    )
                opt_det.zero_grad()
                if opt_gen:
                    opt_gen.zero_grad()
                loss.backward()
                opt_det.step()
                if opt_gen:
                    opt_gen.step()
                epoch_losses.append(float(loss.detach()))
            row = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "seconds": time.time() - started,
                "detector_lr": float(opt_det.param_groups[0]["lr"]),
            }
            if opt_gen is not None:
                row["generator_lr"] = float(opt_gen.param_groups[0]["lr"])
            if cfg.probe_every and (epoch + 1) % cfg.probe_every == 0:
                row.update(_probe(model, generator, samples, cfg))
            metrics.append(row)
            if verbose:
                probe_txt = ""
                if "probe_map50" in row:
                    mp = row["probe_map50"]
                    ur = row["probe_ur_asr"]
                    probe_txt = (
                        f"  mAP@50 {mp if mp is None else round(mp, 3)}"
                        f"  UR-ASR {ur if ur is None else round(ur, 3)}"
                    )
                print(f"epoch {epoch:3d}  loss {row['loss']:.4f}{probe_txt}", flush=True)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_detector(model, ckpt_dir / f"detector_ep{epoch + 1}.pt", step=(epoch + 1) * steps_per_epoch)
            if cfg.lr_decay != 1.0:
                for group in opt_det.param_groups:
                    group["lr"] *= cfg.lr_decay
            gen_factor = cfg.lr_decay * cfg.generator_lr_decay
            if opt_gen is not None and gen_factor != 1.0:
                for group in opt_gen.param_groups:
                    group["lr"] *= gen_factor
    finally:
        if plans_fh:
            plans_fh.close()

    final_row = {"epoch": cfg.epochs - 1, "final": True}
    final_row.update(_probe(model, generator, samples, cfg))
    metrics.append(final_row)

    det_path = ckpt_dir / "detector.pt"
    gen_path = ckpt_dir / "generator.pt"
    save_detector(model, det_path, step=cfg.epochs * steps_per_epoch)
    save_generator(generator, gen_path)
    _write_metrics(run_dir / "metrics.jsonl", metrics)
    return RunArtifacts(run_dir, det_path, gen_path, metrics, pool, model, generator)


def train_joint(
    samples: Sequence[Sample],
    model: GridDetector,
    cfg: TrainConfig,
    run_dir: str | Path,
    generator: TriggerGenerator | None = None,
    stats: DatasetStats | None = None,
    pool: TargetPool | None = None,
    verbose: bool = False,
) -> RunArtifacts:
    """Train detector and generator jointly on a poisoned sample stream."""
    if pool is None:
        pool = TargetPool.build(model.cfg.k)
    if generator is None:
        h, w = samples[0].image.shape[:2]
        _, generator = build_models(model.cfg, cfg, (w, h), pool)
    return _run_loop(samples, model, generator, cfg, Path(run_dir), stats, pool, train_generator=True, verbose=verbose)


def train_transfer(
    samples: Sequence[Sample],
    model: GridDetector,
    frozen_generator: TriggerGenerator,
    cfg: TrainConfig,
    run_dir: str | Path,
    stats: DatasetStats | None = None,
    pool: TargetPool | None = None,
    verbose: bool = False,
) -> RunArtifacts:
    """Same poisoning loop against a fresh detector, generator frozen."""
    if frozen_generator.k != model.cfg.k:
        raise TrainingError(
            f"donor generator K={frozen_generator.k} does not match detector K={model.cfg.k}"
        )
    donor_checksum = parameter_checksum(frozen_generator)
    artifacts = _run_loop(
        samples,
        model,
        frozen_generator,
        cfg,
        Path(run_dir),
        stats,
        pool,
        train_generator=False,
        extra_config={"donor_generator_checksum": donor_checksum},
        verbose=verbose,
    )
    if parameter_checksum(frozen_generator) != donor_checksum:
        raise TrainingError("frozen generator parameters changed during transfer")
    return artifacts
