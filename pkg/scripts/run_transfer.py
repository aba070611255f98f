"""Carry a trained trigger generator onto a freshly initialized detector.

The donor generator stays frozen while a new detector (different init
seed) is warmed up clean and then trained on data poisoned by the donor.
If the untargeted-removal rate lands near the donor run's, the backdoor
lives in the generator, not in one detector's weights.
"""

import argparse
import time
from pathlib import Path

from multitrig.evaluation import render_asr_table
from multitrig.experiments import (
    SmokeProtocol,
    build_corpus,
    evaluate_arm,
    train_backdoored,
    train_transferred,
)
from multitrig.targets import Scenario
from multitrig.trigger import load_generator


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--donor", default=None, help="existing attack run directory to take the generator from")
    ap.add_argument("--runs", default="runs/transfer", help="directory for checkpoints and metrics")
    ap.add_argument("--verbose", action="store_true", help="per-epoch progress")
    args = ap.parse_args()

    proto = SmokeProtocol()
    samples, stats, pool = build_corpus(proto)
    root = Path(args.runs)
    t0 = time.time()

    donor_ur = None
    if args.donor:
        gen = load_generator(Path(args.donor) / "checkpoints" / "generator.pt")
        print(f"loaded donor generator from {args.donor}", flush=True)
    else:
        print("training donor run", flush=True)
        model, gen = train_backdoored(samples, stats, pool, proto, root / "donor", verbose=args.verbose)
        _, rep = evaluate_arm(model, gen, samples, proto)
        donor_ur = rep.mean_asr(Scenario.UNTARGETED_REMOVAL)

    print("training fresh detector against the frozen generator", flush=True)
    model_t = train_transferred(samples, stats, pool, gen, proto, root / "fresh", verbose=args.verbose)
    mp, rep_t = evaluate_arm(model_t, gen, samples, proto)
    print(render_asr_table(rep_t, clean_map=mp.map_50_95, title="fresh detector, donor trigger (%)"))
    ur = rep_t.mean_asr(Scenario.UNTARGETED_REMOVAL)
    if donor_ur is not None and ur is not None:
        print(f"untargeted removal: donor {100 * donor_ur:.1f} vs fresh {100 * ur:.1f}")
    print(f"done in {(time.time() - t0) / 60:.1f} min; artifacts under {root}/")


if __name__ == "__main__":
    main()
