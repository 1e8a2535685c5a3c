"""Preset configurations for the desk-scale experiments.

The acceptance suite and the scripts in ``scripts/`` build their runs from
these functions, so a calibration change happens in exactly one place.
The defaults in :mod:`ciseg.config` describe the full-size model; these
presets shrink it until a run fits on one CPU core.
"""

from __future__ import annotations

import dataclasses

from .config import Ablations, LossWeights, ModelConfig, TrainConfig

SEEDS = (0, 1, 2)

# 32x32 canvases, wider backbone than the default, memory at stride 2
TOY_MODEL = ModelConfig(
    d_q=32,
    decoder_layers=3,
    backbone_channels=[32, 64, 128],
    image_size=(32, 32),
    memory_level=2,
)

JOINT_ITERATIONS = 4000
CONTINUAL_ITERATIONS = 1000
LEARNING_RATE = 1e-3
TRAIN_POOL = 4096
TEST_SIZE = 128
# class CE doubled as in the base network; the learning rate drops tenfold
# for the last quarter of every step
CLASS_CE_WEIGHT = 2.0
LR_DROP_AT = 0.75


def _common(seed: int, iterations: int) -> dict:
    return dict(
        steps_iterations=iterations,
        learning_rate=LEARNING_RATE,
        lr_drop_at=LR_DROP_AT,
        batch_size=16,
        train_pool_size=TRAIN_POOL,
        test_size=TEST_SIZE,
        seed=seed,
        model=TOY_MODEL,
        loss_weights=LossWeights(lambda_ce=CLASS_CE_WEIGHT),
    )


def joint_config(seed: int, iterations: int = JOINT_ITERATIONS, **overrides) -> TrainConfig:
    """All ten classes in a single step ("10-0")."""
    base = _common(seed, iterations)
    base.update(protocol="10-0", eval_interval=iterations // 8)
    base.update(overrides)
    return TrainConfig(**base)


def continual_config(
    seed: int,
    ablations: Ablations | None = None,
    protocol: str = "6-2-2",
    mode: str = "semantic",
    iterations: int = CONTINUAL_ITERATIONS,
    **overrides,
) -> TrainConfig:
    base = _common(seed, iterations)
    base.update(
        protocol=protocol,
        mode=mode,
        eval_interval=iterations // 2,
        ablations=ablations if ablations is not None else Ablations(),
    )
    base.update(overrides)
    return TrainConfig(**base)


def single_kd_off() -> dict[str, Ablations]:
    """The full method with one distillation term removed at a time."""
    full = Ablations()
    return {
        name: dataclasses.replace(full, **{name: False})
        for name in ("use_query_kd", "use_class_kd", "use_mask_kd", "use_pod_kd")
    }
