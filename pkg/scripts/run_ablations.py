"""Compare the full attack against its two generator-side ablations.

Arm 1 replaces the disentangled two-branch generator with a flat lookup
over the whole target pool; arm 2 drops the frequency/co-occurrence
weighting and fills poisoned batch slots uniformly. Both are trained
under the identical two-phase protocol and budget as the full method.
"""

import argparse
import time
from pathlib import Path

from multitrig.experiments import (
    SmokeProtocol,
    build_corpus,
    evaluate_arm,
    targeted_mean,
    train_backdoored,
)

ARMS = (
    ("full", {}),
    ("no-disentanglement", {"disable_disentanglement": True}),
    ("no-weighted-batches", {"disable_strategic_batching": True}),
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", default="runs/ablations", help="directory for checkpoints and metrics")
    ap.add_argument("--verbose", action="store_true", help="per-epoch progress")
    args = ap.parse_args()

    proto = SmokeProtocol()
    samples, stats, pool = build_corpus(proto)
    root = Path(args.runs)
    t0 = time.time()

    rows = []
    for name, flags in ARMS:
        print(f"training {name}", flush=True)
        model, gen = train_backdoored(
            samples, stats, pool, proto, root / name.replace("-", "_"), verbose=args.verbose, **flags
        )
        mp, rep = evaluate_arm(model, gen, samples, proto)
        rows.append((name, mp.map_50, targeted_mean(rep)))

    print(f"\n{'arm':<22} {'mAP@50':>8} {'targeted ASR':>14}")
    for name, map50, tmean in rows:
        print(f"{name:<22} {map50:>8.3f} {100 * tmean:>13.1f}%")
    print(f"\ndone in {(time.time() - t0) / 60:.1f} min; artifacts under {root}/")


if __name__ == "__main__":
    main()
