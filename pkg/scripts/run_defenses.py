"""Run the defense harness against a backdoored detector.

Evaluates the default panel (JPEG recompression, mean and median
filtering, clean fine-tuning, channel pruning, fine-pruning) plus an
aggressive prune of 90% of channels, and prints one table row per
defense. Reuses an existing run's checkpoints when --run is given,
otherwise trains the attack first.
"""

import argparse
import time
from pathlib import Path

from multitrig.defense import DefenseKind, DefenseSpec, render_defense_table
from multitrig.detector import load_detector
from multitrig.experiments import SmokeProtocol, build_corpus, run_defense_harness, train_backdoored
from multitrig.trigger import load_generator


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default=None, help="existing attack run directory (with checkpoints/)")
    ap.add_argument("--runs", default="runs/defenses", help="where to train if no --run is given")
    ap.add_argument("--verbose", action="store_true", help="per-epoch progress")
    args = ap.parse_args()

    proto = SmokeProtocol()
    samples, stats, pool = build_corpus(proto)
    t0 = time.time()

    if args.run:
        ckpt = Path(args.run) / "checkpoints"
        model, _ = load_detector(ckpt / "detector.pt")
        gen = load_generator(ckpt / "generator.pt")
        print(f"loaded {args.run}", flush=True)
    else:
        print("training backdoored detector", flush=True)
        model, gen = train_backdoored(samples, stats, pool, proto, Path(args.runs) / "full", verbose=args.verbose)

    report = run_defense_harness(
        model, gen, samples, proto, extra=(DefenseSpec(DefenseKind.PRUNE, fraction=0.9),)
    )
    print(render_defense_table(report))
    print(f"done in {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
