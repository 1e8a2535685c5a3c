#!/usr/bin/env python3
"""Dump the toy presets as JSON configs usable with ``ciseg train --config``."""

import argparse
from pathlib import Path

from ciseg import experiments as E
from ciseg.config import Ablations, ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("configs"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    presets = {
        "joint_10-0": E.joint_config(0),
        "full_6-2-2": E.continual_config(0),
        "naive_6-2-2": E.continual_config(0, Ablations.naive()),
        "full_4-2_instance": E.continual_config(0, protocol="4-2 (2 steps)", mode="instance"),
    }
    for name, train in presets.items():
        exp = ExperimentConfig(train=train, output_dir=f"runs/{name}")
        (args.out / f"{name}.json").write_text(exp.to_json() + "\n")
        print(args.out / f"{name}.json")


if __name__ == "__main__":
    main()
