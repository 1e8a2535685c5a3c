#!/usr/bin/env python3
"""Joint-training pilot on all ten shapes.

This is the run used to pick the toy preset and to check the joint sanity
threshold.  Every evaluation's miou_all is printed and, with --json, written
together with the wall time so the numbers can be kept alongside the code.

    python3 scripts/pilot_joint.py --seeds 0 1 2 --json scripts/results/pilot_joint.json
"""

import argparse
import json
import logging
import time
from pathlib import Path

from ciseg import experiments as E
from ciseg.trainer import train_continual


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(E.SEEDS))
    ap.add_argument("--iterations", type=int, default=E.JOINT_ITERATIONS)
    ap.add_argument("--json", type=Path, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    for seed in args.seeds:
        cfg = E.joint_config(seed, args.iterations)
        t0 = time.perf_counter()
        res = train_continual(cfg)
        elapsed = time.perf_counter() - t0
        curve = [(r.iteration, r.miou_all) for r in res.records]
        best = max(m for _, m in curve)
        print(f"seed {seed}: best miou_all {best:.3f}, final {curve[-1][1]:.3f}, {elapsed / 60:.1f} min")
        rows.append({"seed": seed, "curve": curve, "best": best, "seconds": round(elapsed, 1)})

    if args.json is not None:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps({"iterations": args.iterations, "runs": rows}, indent=2))


if __name__ == "__main__":
    main()
