"""Dataclass configs shared by the model, trainer and CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class ModelConfig:
    d_q: int = 64
    decoder_layers: int = 3
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    image_size: tuple[int, int] = (64, 64)
    attention_heads: int = 4
    masked_attention: bool = True
    # which top-down pixel-decoder map the queries attend to; 0 is the coarsest
    memory_level: int = 1
    # cycle the decoder layers through every map, coarse to fine, instead
    multi_scale_memory: bool = False

    def __post_init__(self):
        self.backbone_channels = list(self.backbone_channels)
        self.image_size = tuple(self.image_size)
        if self.d_q <= 0 or self.attention_heads <= 0:
            raise ConfigError("d_q and attention_heads must be positive")
        if self.d_q % self.attention_heads:
            raise ConfigError(
                f"d_q={self.d_q} not divisible by attention_heads={self.attention_heads}"
            )
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1")
        if len(self.backbone_channels) < 1:
            raise ConfigError("backbone needs at least one stage")
        if not 0 <= self.memory_level < len(self.backbone_channels):
            raise ConfigError(
                f"memory_level={self.memory_level} outside 0..{len(self.backbone_channels) - 1}"
            )
        factor = self.downsampling
        for axis, n in zip("HW", self.image_size):
            if n % factor:
                raise ConfigError(
                    f"image {axis}={n} not divisible by backbone downsampling {factor}"
                )

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def memory_stride(self) -> int:
        return 2 ** (len(self.backbone_channels) - self.memory_level)


@dataclass
class CostWeights:
    w_class: float = 2.0
    w_ce: float = 5.0
    w_dice: float = 5.0

    def __post_init__(self):
        ws = (self.w_class, self.w_ce, self.w_dice)
        if any(w < 0 for w in ws):
            raise ConfigError("cost weights must be non-negative")
        if not any(ws):
            raise ConfigError("cost weights must not all be zero")


@dataclass
class LossWeights:
    lambda1: float = 1.0  # query KD
    lambda2: float = 5.0  # class KD
    lambda3: float = 300.0  # mask KD
    lambda4: float = 100.0  # POD KD
    lambda_c: float = 5.0  # BCE inside mask terms
    lambda_d: float = 5.0  # dice inside mask terms
    no_object_weight: float = 0.1  # class weight of no-object in the supervised CE
    lambda_ce: float = 1.0  # weight of the supervised CE itself

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class Ablations:
    freeze_queries: bool = True
    independent_match: bool = True
    use_query_kd: bool = True
    use_class_kd: bool = True
    use_mask_kd: bool = True
    use_pod_kd: bool = True

    @classmethod
    def naive(cls) -> "Ablations":
        return cls(**{f.name: False for f in dataclasses.fields(cls)})

    def vector(self) -> tuple[bool, ...]:
        return tuple(getattr(self, f.name) for f in dataclasses.fields(self))


@dataclass
class TrainConfig:
    protocol: str = "6-2 (3 steps)"
    setting: str = "overlapped"
    mode: str = "semantic"
    steps_iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    # optional one-off decay: after this fraction of a step's iterations the
    # learning rate is multiplied by lr_drop_factor (None keeps it constant)
    lr_drop_at: float | None = None
    lr_drop_factor: float = 0.1
    seed: int = 0
    class_order_seed: int = 0
    eval_interval: int = 200
    train_pool_size: int = 512
    test_size: int = 64
    instance_count_range: tuple[int, int] = (1, 4)
    pod_scales: list[int] = field(default_factory=lambda: [1, 2])
    hflip: bool = True
    deep_supervision: bool = True
    # score each query only over its own group's classes at evaluation
    # (ignored when independent matching is off)
    group_aware_inference: bool = True
    record_wall_clock: bool = False
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    ablations: Ablations = field(default_factory=Ablations)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cost_weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self):
        self.instance_count_range = tuple(self.instance_count_range)
        self.pod_scales = list(self.pod_scales)
        if self.steps_iterations < 1:
            raise ConfigError("steps_iterations must be >= 1")
        if self.eval_interval < 1 or self.steps_iterations % self.eval_interval:
            raise ConfigError(
                f"steps_iterations={self.steps_iterations} must be a multiple of "
                f"eval_interval={self.eval_interval}"
            )
        if self.mode not in ("semantic", "instance"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.setting not in ("overlapped", "disjoint"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_drop_at is not None and not 0.0 < self.lr_drop_at <= 1.0:
            raise ConfigError("lr_drop_at must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    dataset_cache: str | None = None
    plots: bool = False
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        """Hash of everything that affects results (paths and plot toggles excluded)."""
        payload = json.dumps(dataclasses.asdict(self.train), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def train_config_hash(cfg: TrainConfig) -> str:
    return ExperimentConfig(train=cfg).config_hash()


_NESTED = {
    "train": TrainConfig,
    "model": ModelConfig,
    "ablations": Ablations,
    "loss_weights": LossWeights,
    "cost_weights": CostWeights,
}


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            value = _build(_NESTED[key], value, f"{where}.{key}")
        kwargs[key] = value
    if cls is ExperimentConfig and kwargs.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(
            f"{where}: schema_version {kwargs['schema_version']} != {SCHEMA_VERSION}"
        )
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
