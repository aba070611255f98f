"""Train the pinned attack bundle and print its headline numbers.

Backdoors a detector on the synthetic corpus (clean warmup, then joint
attack training), evaluates every scenario's success rate, and compares
clean accuracy against a never-poisoned control trained at the same
total budget. A few minutes on one CPU core.
"""

import argparse
import time
from pathlib import Path

from multitrig.evaluation import clean_map_for, render_asr_table
from multitrig.experiments import (
    SmokeProtocol,
    build_corpus,
    evaluate_arm,
    train_backdoored,
    train_clean_control,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", default="runs/smoke", help="directory for checkpoints and metrics")
    ap.add_argument("--skip-control", action="store_true", help="train only the attacked detector")
    ap.add_argument("--verbose", action="store_true", help="per-epoch progress")
    args = ap.parse_args()

    proto = SmokeProtocol()
    samples, stats, pool = build_corpus(proto)
    root = Path(args.runs)
    t0 = time.time()

    print(f"training backdoored detector ({proto.warm_epochs}+{proto.attack_epochs} epochs)", flush=True)
    model, gen = train_backdoored(samples, stats, pool, proto, root / "full", verbose=args.verbose)
    mp, rep = evaluate_arm(model, gen, samples, proto)
    print(render_asr_table(rep, clean_map=mp.map_50_95))

    if not args.skip_control:
        print("training clean control at the same budget", flush=True)
        control = train_clean_control(samples, stats, pool, proto, root / "control", verbose=args.verbose)
        mp_control = clean_map_for(control, samples[: proto.eval_images])
        kept = 100 * mp.map_50 / mp_control.map_50 if mp_control.map_50 else float("nan")
        print(
            f"clean mAP@50: backdoored {mp.map_50:.3f} vs control {mp_control.map_50:.3f}"
            f" ({kept:.0f}% retained)"
        )

    print(f"done in {(time.time() - t0) / 60:.1f} min; artifacts under {root}/")


if __name__ == "__main__":
    main()
