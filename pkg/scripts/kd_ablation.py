#!/usr/bin/env python3
"""Drop one distillation term at a time and compare final miou_all.

Every variant shares the seed of the full run it is compared with, so the
only difference within a row is the disabled term.
"""

import argparse
import logging

from ciseg import experiments as E
from ciseg.trainer import train_continual


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(E.SEEDS))
    ap.add_argument("--iterations", type=int, default=E.CONTINUAL_ITERATIONS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    variants = {"full": None, **E.single_kd_off()}
    print("seed | " + " | ".join(f"{n:>13s}" for n in variants))
    for seed in args.seeds:
        cells = []
        for flags in variants.values():
            res = train_continual(E.continual_config(seed, flags, iterations=args.iterations))
            cells.append(res.records[-1].miou_all)
        print(f"{seed:4d} | " + " | ".join(f"{v:13.3f}" for v in cells))


if __name__ == "__main__":
    main()
