#!/usr/bin/env python3
"""Naive fine-tuning against the full method on the 6-2-2 protocol.

Prints old-class mIoU at the end of every step for both, per seed.  Pass
--mode instance --protocol "4-2 (2 steps)" to compare old-class AP50 instead.
"""

import argparse
import json
import logging
from pathlib import Path

from ciseg import experiments as E
from ciseg.config import Ablations
from ciseg.trainer import train_continual


def step_ends(records):
    ends = {}
    for r in records:
        ends[r.step] = r
    return [ends[s] for s in sorted(ends)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(E.SEEDS))
    ap.add_argument("--protocol", default="6-2-2")
    ap.add_argument("--mode", choices=("semantic", "instance"), default="semantic")
    ap.add_argument("--iterations", type=int, default=E.CONTINUAL_ITERATIONS)
    ap.add_argument("--out", type=Path, default=None, help="keep run directories here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    key = "ap50_old" if args.mode == "instance" else "miou_old"
    summary = {}
    for seed in args.seeds:
        for name, flags in (("naive", Ablations.naive()), ("full", Ablations())):
            cfg = E.continual_config(seed, flags, args.protocol, args.mode, args.iterations)
            out = args.out / f"{name}-s{seed}" if args.out else None
            res = train_continual(cfg, out)
            values = [getattr(r, key) for r in step_ends(res.records)]
            summary[f"{name}-s{seed}"] = values
            print(f"seed {seed} {name:5s} {key} per step: " + "  ".join(f"{v:.3f}" for v in values))
    if args.out:
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
