"""Procedural shapes scenes, continual protocols and step relabeling.

Scenes are pure functions of an integer seed.  A step's targets are views over
the full ground truth: anything outside the step's class set is background.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as MplPath

SHAPES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "star",
    "ellipse",
    "L-shape",
    "T-shape",
)
VOCABULARY_SIZE = len(SHAPES)
BACKGROUND = -1
MIN_PIXELS = 16
MAX_RESAMPLES = 100

# shapes whose identity depends on orientation only get a small tilt
_LIMITED_ROTATION = {"square": np.pi / 12, "diamond": np.pi / 12}


class ProtocolError(ValueError):
    pass


class SceneGenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class Protocol:
    name: str
    base_classes: int
    increment: int
    steps: int
    setting: str = "overlapped"
    class_order_seed: int = 0
    vocabulary_size: int | None = VOCABULARY_SIZE

    @property
    def total_classes(self) -> int:
        return self.base_classes + (self.steps - 1) * self.increment

    @property
    def class_order(self) -> list[int]:
        n = self.vocabulary_size or self.total_classes
        perm = np.random.default_rng(self.class_order_seed).permutation(n)
        return [int(c) for c in perm[: self.total_classes]]

    def step_classes(self, step: int) -> list[int]:
        if not 0 <= step < self.steps:
            raise ProtocolError(f"step {step} outside 0..{self.steps - 1}")
        order = self.class_order
        if step == 0:
            return order[: self.base_classes]
        lo = self.base_classes + (step - 1) * self.increment
        return order[lo : lo + self.increment]

    def seen_classes(self, step: int) -> list[int]:
        out: list[int] = []
        for s in range(step + 1):
            out.extend(self.step_classes(s))
        return out


_PROTOCOL_RE = re.compile(r"^\s*(\d+)-(\d+)((?:-\d+)*)\s*(?:\((\d+)\s+steps?\))?\s*$")


def build_protocol(
    name: str,
    setting: str = "overlapped",
    class_order_seed: int = 0,
    vocabulary_size: int | None = VOCABULARY_SIZE,
) -> Protocol:
    """Parse "B-I (S steps)", "B-I-I" or "B-0" into a schedule.

    A bare "B-I" means one increment (two steps).  Pass ``vocabulary_size=None``
    to skip the overflow check and number classes 0..total-1.
    """
    m = _PROTOCOL_RE.match(name)
    if not m:
        raise ProtocolError(f"malformed protocol name {name!r}")
    base, inc = int(m.group(1)), int(m.group(2))
    extra = [int(x) for x in m.group(3).split("-")[1:]] if m.group(3) else []
    if any(x != inc for x in extra):
        raise ProtocolError(f"unequal increments in {name!r}")
    chained_steps = 2 + len(extra)
    if m.group(4) is not None:
        steps = int(m.group(4))
        if extra and steps != chained_steps:
            raise ProtocolError(f"{name!r}: step count disagrees with chained increments")
    elif inc == 0:
        steps = 1
    else:
        steps = chained_steps
    if base < 1 or steps < 1:
        raise ProtocolError(f"{name!r}: need at least one base class and one step")
    if inc == 0 and steps != 1:
        raise ProtocolError(f"{name!r}: zero increment only allowed for a single step")
    if setting not in ("overlapped", "disjoint"):
        raise ProtocolError(f"unknown setting {setting!r}")
    proto = Protocol(
        name=name.strip(),
        base_classes=base,
        increment=inc,
        steps=steps,
        setting=setting,
        class_order_seed=class_order_seed,
        vocabulary_size=vocabulary_size,
    )
    if vocabulary_size is not None and proto.total_classes > vocabulary_size:
        raise ProtocolError(
            f"vocabulary overflow: {name!r} needs {proto.total_classes} classes, "
            f"vocabulary has {vocabulary_size}"
        )
    return proto


# --------------------------------------------------------------------------
# scenes


@dataclass
class ShapeInstance:
    class_id: int
    center: tuple[float, float]  # (row, col)
    size: float
    rotation: float
    fill: tuple[float, float, float]


@dataclass
class ShapeScene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    instances: list[ShapeInstance]
    masks: np.ndarray  # N x H x W bool, visible regions in draw order
    seed: int = 0

    @property
    def canvas(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def class_ids(self) -> list[int]:
        return [inst.class_id for inst in self.instances]

    def label_map(self) -> np.ndarray:
        labels = np.full(self.canvas, BACKGROUND, dtype=np.int64)
        for inst, mask in zip(self.instances, self.masks):
            labels[mask] = inst.class_id
        return labels

    def instance_map(self) -> np.ndarray:
        ids = np.full(self.canvas, BACKGROUND, dtype=np.int64)
        for k, mask in enumerate(self.masks):
            ids[mask] = k
        return ids


def _shape_mask(name: str, u: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    """Inside-test in shape-local coordinates (u right, v down), half-extent s."""
    if name == "circle":
        return u**2 + v**2 <= s**2
    if name == "ring":
        r2 = u**2 + v**2
        return (r2 <= s**2) & (r2 >= (0.55 * s) ** 2)
    if name == "ellipse":
        return (u / s) ** 2 + (v / (0.5 * s)) ** 2 <= 1.0
    if name == "square":
        return (np.abs(u) <= 0.85 * s) & (np.abs(v) <= 0.85 * s)
    if name == "diamond":
        return np.abs(u) / (0.6 * s) + np.abs(v) / s <= 1.0
    if name == "cross":
        w = 0.33 * s
        return ((np.abs(u) <= s) & (np.abs(v) <= w)) | ((np.abs(v) <= s) & (np.abs(u) <= w))
    if name == "L-shape":
        t = s / 3
        return ((u >= -s) & (u <= -t) & (np.abs(v) <= s)) | (
            (np.abs(u) <= s) & (v >= t) & (v <= s)
        )
    if name == "T-shape":
        t = s / 3
        return ((np.abs(u) <= s) & (v >= -s) & (v <= -t)) | (
            (np.abs(u) <= t) & (np.abs(v) <= s)
        )
    if name in ("triangle", "star"):
        if name == "triangle":
            ang = -np.pi / 2 + np.arange(3) * 2 * np.pi / 3
            radii = np.full(3, s)
        else:
            ang = -np.pi / 2 + np.arange(10) * np.pi / 5
            radii = np.where(np.arange(10) % 2 == 0, s, 0.45 * s)
        verts = np.stack([radii * np.cos(ang), radii * np.sin(ang)], axis=1)
        pts = np.stack([u.ravel(), v.ravel()], axis=1)
        return MplPath(verts).contains_points(pts).reshape(u.shape)
    raise ValueError(f"unknown shape {name!r}")


def render_instance(inst: ShapeInstance, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = rows - inst.center[0], cols - inst.center[1]
    c, s = np.cos(inst.rotation), np.sin(inst.rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return _shape_mask(SHAPES[inst.class_id], u, v, inst.size)


def _size_range(canvas: tuple[int, int]) -> tuple[float, float]:
    m = min(canvas)
    return 0.15 * m, 0.25 * m


def generate_scene(
    seed: int,
    class_pool: Sequence[int],
    instance_count_range: tuple[int, int] = (1, 4),
    image_size: tuple[int, int] = (64, 64),
    required_classes: Sequence[int] = (),
) -> ShapeScene:
    """Render a random scene; later instances occlude earlier ones.

    ``required_classes`` (if any) guarantees one instance drawn from that set.
    Placements that leave any instance with fewer than 16 visible pixels, or
    hide more than half of an earlier instance, are resampled.
    """
    if not class_pool:
        raise ValueError("class_pool must be non-empty")
    lo, hi = instance_count_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad instance_count_range {instance_count_range}")
    rng = np.random.default_rng(seed)
    canvas = tuple(image_size)
    h, w = canvas
    n = int(rng.integers(lo, hi + 1))
    classes = [int(c) for c in rng.choice(class_pool, size=n)]
    if required_classes:
        classes[0] = int(rng.choice(list(required_classes)))
        classes = [classes[i] for i in rng.permutation(n)]
    smin, smax = _size_range(canvas)

    instances: list[ShapeInstance] = []
    full: list[np.ndarray] = []
    for cls in classes:
        for _ in range(MAX_RESAMPLES):
            size = float(rng.uniform(smin, smax))
            margin = size * 0.9
            center = (float(rng.uniform(margin, h - margin)), float(rng.uniform(margin, w - margin)))
            limit = _LIMITED_ROTATION.get(SHAPES[cls], np.pi)
            rotation = float(rng.uniform(-limit, limit))
            fill = tuple(float(x) for x in rng.uniform(0.35, 1.0, size=3))
            inst = ShapeInstance(cls, center, size, rotation, fill)
            mask = render_instance(inst, canvas)
            if mask.sum() < MIN_PIXELS:
                continue
            ok = True
            for prev_full, prev_vis in zip(full, _visible(full)):
                vis = prev_vis & ~mask
                if vis.sum() < max(MIN_PIXELS, 0.5 * prev_full.sum()):
                    ok = False
                    break
            if ok:
                instances.append(inst)
                full.append(mask)
                break
        else:
            raise SceneGenerationError(
                f"seed {seed}: could not place class {cls} after {MAX_RESAMPLES} tries"
            )

    masks = np.stack(_visible(full)) if full else np.zeros((0, h, w), bool)
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = rng.uniform(0.0, 0.3, size=3)
    image += rng.normal(0.0, 0.03, size=(h, w, 3))
    for inst, mask in zip(instances, masks):
        image[mask] = inst.fill
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return ShapeScene(image=image, instances=instances, masks=masks, seed=seed)


def _visible(full: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    for k, m in enumerate(full):
        vis = m.copy()
        for later in full[k + 1 :]:
            vis &= ~later
        out.append(vis)
    return out


# --------------------------------------------------------------------------
# step targets


@dataclass
class StepTarget:
    labels: np.ndarray  # H x W int64, BACKGROUND or a class id in step_classes
    instances: list[tuple[int, np.ndarray]]  # (class id, visible mask)
    step_classes: tuple[int, ...]
    mode: str = "semantic"

    def semantic_targets(self) -> list[tuple[int, np.ndarray]]:
        """One (class, union mask) per present class, ordered by class id."""
        present = sorted(set(int(c) for c in np.unique(self.labels)) - {BACKGROUND})
        return [(c, self.labels == c) for c in present]

    def targets(self) -> list[tuple[int, np.ndarray]]:
        return self.semantic_targets() if self.mode == "semantic" else list(self.instances)


def relabel_for_step(scene: ShapeScene | StepTarget, step_classes, mode: str = "semantic") -> StepTarget:
    keep = set(int(c) for c in step_classes)
    if isinstance(scene, StepTarget):
        labels = np.where(np.isin(scene.labels, list(keep)), scene.labels, BACKGROUND)
        inst = [(c, m) for c, m in scene.instances if c in keep]
    else:
        full = scene.label_map()
        labels = np.where(np.isin(full, list(keep)), full, BACKGROUND)
        inst = [(c, m) for c, m in zip(scene.class_ids, scene.masks) if c in keep]
    return StepTarget(labels=labels, instances=inst, step_classes=tuple(step_classes), mode=mode)


# --------------------------------------------------------------------------
# datasets


def sample_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class StepDataset(Sequence):
    """Lazily generated samples for one (protocol, step, split).

    Sample i depends only on (seed, protocol, step, split, i).
    """

    def __init__(
        self,
        protocol: Protocol,
        step: int,
        split: str,
        size: int,
        seed: int = 0,
        mode: str = "semantic",
        image_size: tuple[int, int] = (64, 64),
        instance_count_range: tuple[int, int] = (1, 4),
    ):
        if split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {split!r}")
        if not 0 <= step < protocol.steps:
            raise ProtocolError(f"step {step} outside protocol with {protocol.steps} steps")
        if protocol.vocabulary_size != VOCABULARY_SIZE:
            raise ProtocolError("shape datasets need a protocol over the 10-shape vocabulary")
        self.protocol = protocol
        self.step = step
        self.split = split
        self.size = size
        self.seed = seed
        self.mode = mode
        self.image_size = tuple(image_size)
        self.instance_count_range = tuple(instance_count_range)
        self.step_classes = protocol.step_classes(step)
        self.seen = protocol.seen_classes(step)
        if split == "test":
            # evaluation covers every class learned so far
            self.label_classes = self.seen
            self.pool = self.seen
            self.required: list[int] = []
        else:
            self.label_classes = self.step_classes
            self.required = self.step_classes
            if protocol.setting == "overlapped":
                self.pool = list(range(VOCABULARY_SIZE))
            else:
                self.pool = self.seen

    def __len__(self) -> int:
        return self.size

    def scene(self, i: int) -> ShapeScene:
        if not 0 <= i < self.size:
            raise IndexError(i)
        s = sample_seed(self.seed, self.protocol.name, self.protocol.class_order_seed,
                        self.protocol.setting, self.step, self.split, i)
        return generate_scene(
            s, self.pool, self.instance_count_range, self.image_size, self.required
        )

    def __getitem__(self, i: int) -> tuple[ShapeScene, StepTarget]:
        scene = self.scene(i)
        return scene, relabel_for_step(scene, self.label_classes, self.mode)


def dataset_for_step(protocol: Protocol, step: int, split: str, size: int, **kwargs) -> StepDataset:
    return StepDataset(protocol, step, split, size, **kwargs)


# --------------------------------------------------------------------------
# on-disk cache


def encode_split(ds: StepDataset) -> np.ndarray:
    """N x H x W x 5 uint8: RGB, instance id (255 = none), class id (255 = none)."""
    h, w = ds.image_size
    out = np.zeros((len(ds), h, w, 5), dtype=np.uint8)
    for i in range(len(ds)):
        scene = ds.scene(i)
        out[i, ..., :3] = np.round(scene.image * 255).astype(np.uint8)
        inst = scene.instance_map()
        out[i, ..., 3] = np.where(inst < 0, 255, inst)
        lab = scene.label_map()
        out[i, ..., 4] = np.where(lab < 0, 255, lab)
    return out


@dataclass
class CacheManifest:
    protocol: str
    setting: str
    seed: int
    class_order_seed: int
    size: int
    image_size: tuple[int, int]
    splits: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=list) + "\n"


def write_cache(
    protocol: Protocol,
    out_dir,
    size: int,
    seed: int = 0,
    image_size: tuple[int, int] = (64, 64),
    test_size: int | None = None,
) -> CacheManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CacheManifest(
        protocol=protocol.name,
        setting=protocol.setting,
        seed=seed,
        class_order_seed=protocol.class_order_seed,
        size=size,
        image_size=tuple(image_size),
    )
    for step in range(protocol.steps):
        entry = {"step": step, "classes": protocol.step_classes(step), "files": {}}
        for split in ("train", "test"):
            n = size if split == "train" else (test_size or size)
            ds = StepDataset(protocol, step, split, n, seed=seed, image_size=image_size)
            fname = f"step{step}_{split}.npy"
            np.save(out / fname, encode_split(ds), allow_pickle=False)
            entry["files"][split] = {"file": fname, "count": n}
        manifest.splits.append(entry)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_cached_split(path) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Decode a cache file into (image float32, instance ids, class ids) triples."""
    arr = np.load(path, allow_pickle=False)
    out = []
    for rec in arr:
        image = rec[..., :3].astype(np.float32) / 255.0
        inst = rec[..., 3].astype(np.int64)
        lab = rec[..., 4].astype(np.int64)
        inst[inst == 255] = BACKGROUND
        lab[lab == 255] = BACKGROUND
        out.append((image, inst, lab))
    return out
