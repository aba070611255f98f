"""Command-line surface tying dataset, training, evaluation, defense,
rendering, and transfer into reproducible run directories.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The run root
defaults to ./runs and can be moved with MULTITRIG_RUNS. Every command
persists enough of its configuration to be replayed from disk alone.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import config as cfgio
from .data import DatasetError, DatasetSpec, compute_stats, generate_dataset, load_dataset, save_dataset
from .defense import DefenseKind, DefenseSpec, default_specs, evaluate_defense, render_defense_table
from .detector import GridDetectorConfig, load_detector
from .evaluation import clean_map_for, evaluate_attack, render_asr_table, scenario_targets
from .targets import ALL_SCENARIOS, Scenario, TargetPool, encode
from .trigger import load_generator
from .training import TrainConfig, build_models, train_joint, train_transfer
from .viz import render_scenario_strip, save_patch_png, save_png

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


@dataclass
class RunConfig:
    dataset_dir: str
    detector: GridDetectorConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_size: int = 128


def run_root() -> Path:
    return Path(os.environ.get("MULTITRIG_RUNS", "runs"))


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _load_run(run_dir: Path):
    ckpt = run_dir / "checkpoints"
    if not ckpt.is_dir():
        raise UsageError(f"{run_dir} is not a run directory (no checkpoints/)")
    model, _ = load_detector(ckpt / "detector.pt")
    generator = load_generator(ckpt / "generator.pt")
    meta = {}
    cli_json = run_dir / "cli.json"
    if cli_json.exists():
        meta = cfgio.load_json(cli_json)
    return model, generator, meta


def _eval_samples(dataset_dir: Path, eval_size: int):
    load = load_dataset(dataset_dir)
    missing = [s.id for s in load.samples if s.image is None]
    if missing:
        raise DatasetError(f"{dataset_dir}: {len(missing)} samples have no image file (e.g. {missing[0]})")
    return load.samples[:eval_size], load


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(args) -> int:
    freq = None
    if args.imbalance != 1.0:
        if args.imbalance <= 0:
            raise UsageError(f"--imbalance must be positive, got {args.imbalance}")
        weights = [args.imbalance**c for c in range(args.k)]
        total = sum(weights)
        freq = [w / total for w in weights]
    try:
        spec = DatasetSpec(
            k=args.k,
            n_images=args.n,
            image_size=(args.size, args.size),
            class_frequency=freq,
            objects_per_image=(args.min_objects, args.max_objects),
            seed=args.seed,
        )
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(args.out) if args.out else run_root() / f"dataset-k{args.k}-n{args.n}-seed{args.seed}"
    samples = generate_dataset(spec)
    stats = save_dataset(samples, out_dir, spec.k)
    cfgio.save_json(out_dir / "spec.json", spec)
    print(f"wrote {len(samples)} images to {out_dir}")
    print(f"instances per class: {[int(c) for c in stats.instance_counts]}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_flag_overrides(args) -> dict:
    train: dict = {}
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.seed is not None:
        train["seed"] = args.seed
    if args.det_lr is not None:
        train["detector_lr"] = args.det_lr
    if args.gen_lr is not None:
        train["generator_lr"] = args.gen_lr
    if args.no_disentangle:
        train["disable_disentanglement"] = True
    if args.no_mosaic:
        train["disable_mosaicking"] = True
    if args.no_strategic:
        train["disable_strategic_batching"] = True
    if args.checkpoint_every is not None:
        train["checkpoint_every"] = args.checkpoint_every
    if args.log_plans:
        train["log_batch_plans"] = True
    sampler: dict = {}
    if args.poison_rate is not None:
        sampler["poison_rate"] = args.poison_rate
    if args.batch_size is not None:
        sampler["batch_size"] = args.batch_size
    if sampler:
        train["sampler"] = sampler
    injection: dict = {}
    if args.epsilon is not None:
        injection["epsilon"] = args.epsilon
    if args.patch is not None:
        injection["patch_h"] = args.patch
        injection["patch_w"] = args.patch
    if injection:
        train["injection"] = injection
    return train


def _resolve_run_config(args, k: int) -> RunConfig:
    base = cfgio.to_jsonable(
        RunConfig(dataset_dir=str(args.dataset), detector=GridDetectorConfig(k=k), train=TrainConfig(probe_every=1))
    )
    if args.config:
        _deep_update(base, cfgio.load_json(args.config))
    _deep_update(base, {"dataset_dir": str(args.dataset), "train": _train_flag_overrides(args)})
    try:
        run_cfg = cfgio.from_dict(RunConfig, base)
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if run_cfg.detector.k != k:
        raise UsageError(f"config detector K={run_cfg.detector.k} does not match dataset K={k}")
    return run_cfg


def cmd_train(args) -> int:
    samples_dir = Path(args.dataset)
    load = load_dataset(samples_dir)
    samples = load.samples
    if any(s.image is None for s in samples):
        raise DatasetError(f"{samples_dir}: dataset is missing image files")
    k = len(load.class_names)
    run_cfg = _resolve_run_config(args, k)
    h, w = samples[0].image.shape[:2]
    pool = TargetPool.build(k)
    stats = compute_stats(samples, k)
    model, generator = build_models(run_cfg.detector, run_cfg.train, (w, h), pool)
    out = Path(args.out) if args.out else run_root() / f"train-seed{run_cfg.train.seed}"
    artifacts = train_joint(
        samples, model, run_cfg.train, out, generator=generator, stats=stats, pool=pool, verbose=not args.quiet
    )
    cfgio.save_json(out / "cli.json", {"command": "train", "run_config": run_cfg})
    final = artifacts.metrics[-1]
    print(f"run directory: {artifacts.run_dir}")
    print(f"final probe mAP@50 {final.get('probe_map50')}  UR-ASR {final.get('probe_ur_asr')}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _scenario_args(values) -> tuple[Scenario, ...]:
    if not values:
        return ALL_SCENARIOS
    try:
        return tuple(Scenario(v) for v in values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    model, generator, meta = _load_run(run_dir)
    dataset_dir = Path(args.dataset) if args.dataset else None
    if dataset_dir is None:
        stored = meta.get("run_config", {}).get("dataset_dir")
        if not stored:
            raise UsageError("no --dataset given and the run records none")
        dataset_dir = Path(stored)
    scenarios = _scenario_args(args.scenario)
    samples, _ = _eval_samples(dataset_dir, args.eval_size)
    inj_cfg = cfgio.from_dict(TrainConfig, meta["run_config"]["train"]).injection if meta else TrainConfig().injection
    mp = clean_map_for(model, samples)
    report = evaluate_attack(model, generator, samples, inj_cfg, scenarios=scenarios)
    print(render_asr_table(report, clean_map=mp.map_50_95))
    for scenario in scenarios:
        res = report.results[scenario]
        if scenario.targeted:
            rows = ", ".join(
                f"{key}: {'n/a' if c.value is None else f'{c.value:.2f}'}" for key, c in sorted(res.counts.items())
            )
            print(f"  {scenario.value} per-config: {rows}")
    if args.json:
        cfgio.save_json(
            args.json,
            {"clean_map": mp.map_50_95, "clean_map50": mp.map_50, "asr": report.to_dict()},
        )
        print(f"wrote {args.json}")
    return 0


# ---------------------------------------------------------------------------
# defense


def _parse_defense_spec(text: str) -> DefenseSpec:
    parts = text.split(":")
    name, params = parts[0], parts[1:]
    try:
        if name == "jpeg":
            return DefenseSpec(DefenseKind.JPEG, quality=int(params[0]) if params else 75)
        if name == "mean":
            return DefenseSpec(DefenseKind.MEAN_FILTER, kernel=int(params[0]) if params else 3)
        if name == "median":
            return DefenseSpec(DefenseKind.MEDIAN_FILTER, kernel=int(params[0]) if params else 3)
        if name == "finetune":
            return DefenseSpec(
                DefenseKind.FINE_TUNE,
                epochs=int(params[0]) if params else 2,
                clean_fraction=float(params[1]) if len(params) > 1 else 0.1,
            )
        if name == "prune":
            return DefenseSpec(DefenseKind.PRUNE, fraction=float(params[0]) if params else 0.3)
        if name == "fineprune":
            return DefenseSpec(
                DefenseKind.FINE_PRUNE,
                fraction=float(params[0]) if params else 0.3,
                epochs=int(params[1]) if len(params) > 1 else 2,
            )
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad defense spec {text!r}: {exc}") from exc
    raise UsageError(f"unknown defense {name!r} (use jpeg/mean/median/finetune/prune/fineprune)")


def cmd_defense(args) -> int:
    if not args.all and not args.spec:
        raise UsageError("give --all or at least one --spec")
    specs = default_specs() if args.all else [_parse_defense_spec(s) for s in args.spec]
    run_dir = Path(args.run)
    model, generator, meta = _load_run(run_dir)
    dataset_dir = Path(args.dataset) if args.dataset else None
    if dataset_dir is None:
        stored = meta.get("run_config", {}).get("dataset_dir")
        if not stored:
            raise UsageError("no --dataset given and the run records none")
        dataset_dir = Path(stored)
    samples, _ = _eval_samples(dataset_dir, args.eval_size)
    inj_cfg = cfgio.from_dict(TrainConfig, meta["run_config"]["train"]).injection if meta else TrainConfig().injection
    report = evaluate_defense(model, generator, inj_cfg, samples, samples, specs)
    print(render_defense_table(report))
    if args.json:
        cfgio.save_json(args.json, report.to_dict())
        print(f"wrote {args.json}")
    return 0


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    run_dir = Path(args.run)
    model, generator, meta = _load_run(run_dir)
    dataset_dir = Path(args.dataset) if args.dataset else None
    if dataset_dir is None:
        stored = meta.get("run_config", {}).get("dataset_dir")
        if not stored:
            raise UsageError("no --dataset given and the run records none")
        dataset_dir = Path(stored)
    load = load_dataset(dataset_dir)
    by_id = {s.id: s for s in load.samples}
    k = model.cfg.k
    targets = [encode(Scenario.UNTARGETED_REMOVAL, k), encode(Scenario.TARGETED_REMOVAL, k, c_s=0), encode(Scenario.UNTARGETED_MISCLS, k)]
    if k >= 2:
        targets.append(encode(Scenario.TARGETED_MISCLS, k, c_s=0, c_d=1))
    targets.append(encode(Scenario.UNTARGETED_GENERATION, k))
    inj_cfg = cfgio.from_dict(TrainConfig, meta["run_config"]["train"]).injection if meta else TrainConfig().injection
    out_dir = Path(args.out) if args.out else run_dir / "renders"
    out_dir.mkdir(parents=True, exist_ok=True)
    for sid in args.sample:
        if sid not in by_id:
            raise UsageError(f"sample {sid!r} not in {dataset_dir}")
        strip = render_scenario_strip(model, generator, by_id[sid], inj_cfg, targets, load.class_names)
        save_png(strip, out_dir / f"{sid}_strip.png")
    for target in targets:
        save_patch_png(generator, target, out_dir / f"patch_{target.describe().replace(' ', '_')}.png")
    print(f"wrote renders to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# transfer


def cmd_transfer(args) -> int:
    donor_dir = Path(args.run)
    _, generator, meta = _load_run(donor_dir)
    if not meta:
        raise UsageError(f"{donor_dir} has no cli.json; cannot recover its configuration")
    run_cfg = cfgio.from_dict(RunConfig, meta["run_config"])
    dataset_dir = Path(args.dataset) if args.dataset else Path(run_cfg.dataset_dir)
    load = load_dataset(dataset_dir)
    samples = load.samples
    k = len(load.class_names)
    if args.epochs is not None:
        run_cfg.train.epochs = args.epochs
    if args.seed is not None:
        run_cfg.train.seed = args.seed
    h, w = samples[0].image.shape[:2]
    pool = TargetPool.build(k)
    stats = compute_stats(samples, k)
    model, _ = build_models(run_cfg.detector, run_cfg.train, (w, h), pool)
    out = Path(args.out) if args.out else run_root() / f"transfer-seed{run_cfg.train.seed}"
    artifacts = train_transfer(samples, model, generator, run_cfg.train, out, stats=stats, pool=pool, verbose=not args.quiet)
    cfgio.save_json(
        out / "cli.json",
        {"command": "transfer", "donor": str(donor_dir), "run_config": run_cfg},
    )
    final = artifacts.metrics[-1]
    print(f"run directory: {artifacts.run_dir}")
    print(f"final probe mAP@50 {final.get('probe_map50')}  UR-ASR {final.get('probe_ur_asr')}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="multitrig", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("dataset", help="generate a synthetic shapes dataset")
    p.add_argument("--k", type=int, required=True, help="number of classes")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=112, help="square image side")
    p.add_argument("--imbalance", type=float, default=1.0, help="geometric class-frequency decay ratio (1.0 = uniform)")
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="jointly train detector and trigger generator")
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--config", type=str, default=None, help="JSON run config; flags override")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--poison-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--det-lr", type=float, default=None)
    p.add_argument("--gen-lr", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--patch", type=int, default=None, help="square trigger patch side")
    p.add_argument("--no-disentangle", action="store_true")
    p.add_argument("--no-mosaic", action="store_true")
    p.add_argument("--no-strategic", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-plans", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="attack success rates and clean mAP for a run")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--eval-size", type=int, default=128)
    p.add_argument("--scenario", action="append", default=None, help="restrict to a scenario (repeatable)")
    p.add_argument("--json", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defense", help="defense harness over a backdoored run")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--eval-size", type=int, default=128)
    p.add_argument("--spec", action="append", default=None, help="defense spec like jpeg:75 or prune:0.9 (repeatable)")
    p.add_argument("--all", action="store_true", help="run the default six defenses")
    p.add_argument("--json", type=str, default=None)
    p.set_defaults(func=cmd_defense)

    p = sub.add_parser("render", help="clean/triggered detection strips and trigger patches")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--sample", action="append", required=True, help="sample id (repeatable)")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("transfer", help="retrain a fresh detector against a frozen generator")
    p.add_argument("--run", type=str, required=True, help="donor run directory")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_transfer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
