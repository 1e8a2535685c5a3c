"""Command-line entry point: generate-data, train, eval, ablate, plot.

Exit codes are a scripting contract: 0 on success, 2 for configuration
problems (bad protocol, bad config file, hash mismatch), 3 for anything that
goes wrong at run time.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, read_header
from .config import Ablations, ConfigError, ExperimentConfig
from .data import VOCABULARY_SIZE, ProtocolError, build_protocol, sample_seed, write_cache

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
SEED_ENV = "CISEG_SEED"

log = logging.getLogger("ciseg")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def resolve_seed(flag: int | None, config_seed: int) -> int:
    """--seed beats $CISEG_SEED, which beats the config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None
    return config_seed


def _load_experiment(path, seed_flag=None) -> ExperimentConfig:
    exp = ExperimentConfig.load(path)
    seed = resolve_seed(seed_flag, exp.train.seed)
    if seed != exp.train.seed:
        exp = dataclasses.replace(exp, train=dataclasses.replace(exp.train, seed=seed))
    return exp


def _check_cache(exp: ExperimentConfig):
    """A configured cache must describe the same data the run would generate."""
    manifest_path = Path(exp.dataset_cache) / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"dataset cache {exp.dataset_cache} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    t = exp.train
    expected = {
        "protocol": t.protocol,
        "seed": t.seed,
        "class_order_seed": t.class_order_seed,
        "image_size": list(t.model.image_size),
        "setting": t.setting,
    }
    wrong = {k: (manifest.get(k), v) for k, v in expected.items() if manifest.get(k) != v}
    if wrong:
        raise CliError(f"dataset cache does not match config: {wrong}")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    seed = resolve_seed(args.seed, 0)
    protocol = build_protocol(args.protocol, args.setting, args.class_order_seed, VOCABULARY_SIZE)
    size = (args.image_size, args.image_size)
    try:
        manifest = write_cache(protocol, args.out, args.size, seed=seed, image_size=size,
                               test_size=args.test_size)
    except OSError as exc:
        raise CliError(f"cannot write cache to {args.out}: {exc}", EXIT_RUNTIME) from exc
    print(f"protocol {manifest.protocol} ({manifest.setting}), seed {seed}, {len(manifest.splits)} steps")
    for entry in manifest.splits:
        files = entry["files"]
        print(f"  step {entry['step']}: classes {entry['classes']} "
              f"train {files['train']['count']} test {files['test']['count']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train_continual

    exp = _load_experiment(args.config, args.seed)
    if exp.dataset_cache:
        _check_cache(exp)
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.to_json() + "\n")
    result = train_continual(exp.train, out)
    last = result.records[-1] if result.records else None
    print(f"config {exp.config_hash()}: {len(result.checkpoints)} checkpoints in {out / 'checkpoints'}")
    if last is not None:
        print(_miou_table([last]))
    if exp.plots:
        _plot(out / "metrics.jsonl", out / "plots")
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .checkpoint import load
    from .metrics import MetricsRecord
    from .model import parameter_count
    from .trainer import evaluate, protocol_for

    ckpt_path = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt_path.parent.parent / "config.json"
    if not config_path.exists():
        raise CliError(f"no config found at {config_path}; pass --config")
    exp = ExperimentConfig.load(config_path)
    try:
        header, _ = read_header(ckpt_path.read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read {ckpt_path}: {exc}", EXIT_RUNTIME) from exc
    if header["config_hash"] != exp.config_hash():
        raise CliError(
            f"refusing to evaluate: checkpoint config hash {header['config_hash']} "
            f"!= config hash {exp.config_hash()}"
        )
    step = header["step"] if args.step is None else args.step
    if step > header["step"]:
        raise CliError(f"checkpoint holds step {header['step']}; cannot evaluate step {step}")
    dtype = torch.float64 if exp.train.dtype == "float64" else torch.float32
    model, _ = load(ckpt_path, dtype)
    protocol = protocol_for(exp.train)
    ev = evaluate(model, exp.train, protocol, step)
    rec = MetricsRecord(step=step, iteration=0, param_count=parameter_count(model),
                        config_hash=exp.config_hash(), queue=model.queue.metadata(), **ev)
    print(_miou_table([rec]))
    if args.json:
        Path(args.json).write_text(rec.to_json() + "\n")
    return EXIT_OK


ABLATION_FLAGS = [f.name for f in dataclasses.fields(Ablations)]


def ablation_rows(base: Ablations, grid: list[str]) -> list[Ablations]:
    """Every on/off combination of ``grid``; other flags keep their base value."""
    unknown = [g for g in grid if g not in ABLATION_FLAGS]
    if unknown:
        raise CliError(f"unknown ablation flags {unknown}; choose from {ABLATION_FLAGS}")
    rows = []
    for values in itertools.product([True, False], repeat=len(grid)):
        rows.append(dataclasses.replace(base, **dict(zip(grid, values))))
    return rows


def derived_seed(base_seed: int, flags: Ablations) -> int:
    return sample_seed(base_seed, flags.vector()) % 2**31


def cmd_ablate(args) -> int:
    from .trainer import train_continual

    exp = _load_experiment(args.config, args.seed)
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    if not grid:
        raise CliError("--grid needs at least one ablation flag")
    out = Path(args.out or exp.output_dir) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for flags in ablation_rows(exp.train.ablations, grid):
        seed = derived_seed(exp.train.seed, flags)
        cfg = dataclasses.replace(exp.train, ablations=flags, seed=seed)
        name = "-".join(f"{g}={int(getattr(flags, g))}" for g in grid)
        sub = ExperimentConfig(train=cfg, output_dir=str(out / name))
        (out / name).mkdir(parents=True, exist_ok=True)
        (out / name / "config.json").write_text(sub.to_json() + "\n")
        log.info("ablation row %s (seed %d)", name, seed)
        result = train_continual(cfg, out / name)
        last = result.records[-1]
        rows.append({
            "flags": {g: getattr(flags, g) for g in grid},
            "seed": seed,
            "config_hash": sub.config_hash(),
            "miou_old": last.miou_old,
            "miou_new": last.miou_new,
            "miou_all": last.miou_all,
            "ap50": last.ap50,
        })
    table = _ablation_table(rows, grid)
    payload = {"base_config_hash": exp.config_hash(), "grid": grid, "rows": rows}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_plot(args) -> int:
    paths = _plot(Path(args.metrics), Path(args.out))
    for p in paths:
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# formatting and plotting


def _fmt(x) -> str:
    return "  -  " if x is None else f"{100 * x:5.1f}"


def _miou_table(records) -> str:
    lines = ["step |  old  |  new  |  all "]
    for r in records:
        lines.append(f"{r.step:4d} | {_fmt(r.miou_old)} | {_fmt(r.miou_new)} | {_fmt(r.miou_all)}")
        if r.ap50 is not None:
            lines[-1] += f"   AP50 {_fmt(r.ap50)}"
    return "\n".join(lines)


def _ablation_table(rows, grid) -> str:
    width = max(len(g) for g in grid)
    head = " | ".join(g.rjust(width) for g in grid) + " |  old  |  new  |  all "
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = " | ".join(("on" if r["flags"][g] else "off").rjust(width) for g in grid)
        lines.append(f"{cells} | {_fmt(r['miou_old'])} | {_fmt(r['miou_new'])} | {_fmt(r['miou_all'])}")
    return "\n".join(lines)


def _plot(metrics_path: Path, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import read_metrics

    try:
        records = read_metrics(metrics_path)
    except OSError as exc:
        raise CliError(f"cannot read {metrics_path}: {exc}", EXIT_RUNTIME) from exc
    if not records:
        raise CliError(f"{metrics_path} holds no records", EXIT_RUNTIME)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = sorted({r.config_hash for r in records})
    meta = {"Description": f"config_hash={','.join(hashes)}"}

    # a global x axis: records are in step order, iterations restart per step
    per_step = max(r.iteration for r in records)
    x = [r.step * per_step + r.iteration for r in records]
    boundaries = sorted({r.step * per_step for r in records if r.step > 0})

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, style in (("miou_old", "-"), ("miou_new", "--"), ("miou_all", ":")):
        ys = [getattr(r, key) for r in records]
        pts = [(a, b) for a, b in zip(x, ys) if b is not None]
        if pts:
            ax.plot(*zip(*pts), style, marker="o", ms=3, label=key.split("_")[1])
    for b in boundaries:
        ax.axvline(b, color="0.8", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    ax.set_title(f"grouped mIoU ({hashes[0]})", fontsize=9)
    fig.tight_layout()
    miou_path = out_dir / "miou.png"
    fig.savefig(miou_path, dpi=100, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in sorted(records[0].loss):
        ys = [r.loss.get(key, 0.0) for r in records]
        if any(ys):
            ax.plot(x, ys, marker="o", ms=3, label=key)
    for b in boundaries:
        ax.axvline(b, color="0.8", lw=0.8)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    loss_path = out_dir / "loss.png"
    fig.savefig(loss_path, dpi=100, metadata=meta)
    plt.close(fig)
    return [miou_path, loss_path]


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ciseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a cached dataset for a protocol")
    p.add_argument("--protocol", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, required=True, help="training images per step")
    p.add_argument("--test-size", type=int, default=None, help="test images per step (default: --size)")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--setting", default="overlapped", choices=["overlapped", "disjoint"])
    p.add_argument("--class-order-seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run every step of a continual protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="override output_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a step checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--config", default=None, help="defaults to config.json of the run")
    p.add_argument("--json", default=None, help="also write the metrics record here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every on/off combination of some flags")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="comma-separated ablation flags")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render mIoU and loss curves from a metrics stream")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ciseg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ProtocolError) as exc:
        print(f"ciseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"ciseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
