"""Continual training loop: snapshot, extend, match, distil, update."""

from __future__ import annotations

import copy
import functools
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig, train_config_hash
from .data import Protocol, StepDataset, build_protocol, sample_seed
from .losses import (
    LossBreakdown,
    class_kd,
    mask_kd,
    pod_kd,
    query_kd,
    supervised_loss,
    total_loss,
)
from .matching import Assignment, match_step
from .metrics import (
    IoUAccumulator,
    MetricsRecord,
    ap50_dataset,
    grouped_miou,
    instance_inference,
    semantic_inference,
)
from .model import PredictionSet, SegModel, parameter_count

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def state_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class TeacherSnapshot:
    model: SegModel
    queue_meta: dict
    step_index: int
    checksum: str

    def __call__(self, images) -> PredictionSet:
        with torch.no_grad():
            return self.model(images)


def snapshot_teacher(model: SegModel, step_index: int) -> TeacherSnapshot:
    """Deep, frozen copy of the model (queue included) for distillation."""
    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherSnapshot(teacher, copy.deepcopy(model.queue.metadata()), step_index, state_checksum(teacher))


# --------------------------------------------------------------------------
# data


@functools.lru_cache(maxsize=32)
def _load_pool(protocol: Protocol, step: int, split: str, size: int, seed: int, mode: str,
               image_size: tuple[int, int], icr: tuple[int, int]):
    ds = StepDataset(protocol, step, split, size, seed=seed, mode=mode,
                     image_size=image_size, instance_count_range=icr)
    images, targets, labels, gt_inst = [], [], [], []
    for i in range(len(ds)):
        scene, tgt = ds[i]
        images.append(scene.image.transpose(2, 0, 1))
        targets.append(tgt.targets())
        labels.append(tgt.labels)
        gt_inst.append(list(tgt.instances))
    return np.stack(images), targets, np.stack(labels), gt_inst


def step_pool(cfg: TrainConfig, protocol: Protocol, step: int, split: str):
    size = cfg.train_pool_size if split == "train" else cfg.test_size
    return _load_pool(protocol, step, split, size, cfg.seed, cfg.mode,
                      tuple(cfg.model.image_size), tuple(cfg.instance_count_range))


def sample_batch(cfg: TrainConfig, pool, step: int, iteration: int, dtype=torch.float32):
    """Deterministic mini-batch for (seed, step, iteration)."""
    images, targets, _, _ = pool
    rng = np.random.default_rng(sample_seed(cfg.seed, "batch", step, iteration))
    idx = rng.integers(0, len(images), size=cfg.batch_size)
    flips = rng.random(cfg.batch_size) < 0.5 if cfg.hflip else np.zeros(cfg.batch_size, bool)
    imgs, tgts = [], []
    for i, f in zip(idx, flips):
        img = images[i]
        t = targets[i]
        if f:
            img = img[..., ::-1]
            t = [(c, m[:, ::-1]) for c, m in t]
        imgs.append(np.ascontiguousarray(img))
        tgts.append([(c, np.ascontiguousarray(m)) for c, m in t])
    return torch.from_numpy(np.stack(imgs)).to(dtype), tgts


# --------------------------------------------------------------------------
# losses for one batch


def compute_losses(
    model: SegModel,
    teacher: TeacherSnapshot | None,
    images: torch.Tensor,
    targets: Sequence[Sequence[tuple[int, np.ndarray]]],
    cfg: TrainConfig,
    step_classes: Sequence[int],
    matches: list[list[Assignment]] | None = None,
    attention_masks=None,
) -> tuple[LossBreakdown, list[list[Assignment]], PredictionSet]:
    """Full objective for one batch.

    Returns the breakdown, the matches per image (final layer first, then one
    per auxiliary layer) and the predictions.  Passing ``matches`` and
    ``attention_masks`` from an earlier call holds every discrete choice fixed.
    """
    ab = cfg.ablations
    queue = model.queue
    preds = model(images, attention_masks)
    columns = {c: k for k, c in enumerate(queue.class_ids)}
    candidates = queue.newest_indices() if ab.independent_match else list(range(queue.total_queries))
    readouts = [(preds.class_logits, preds.mask_logits)]
    if cfg.deep_supervision:
        # earlier decoder layers get their own matching, as in the base network
        readouts += preds.aux
    used: list[list[Assignment]] = []
    l_new = images.new_zeros(())
    for b, tgt in enumerate(targets):
        per_image = []
        for r, (cl, ml) in enumerate(readouts):
            if matches is None:
                a = match_step(cl[b], ml[b], tgt, candidates, cfg.cost_weights, columns,
                               allowed_classes=step_classes)
            else:
                a = matches[b][r]
            per_image.append(a)
            l_new = l_new + supervised_loss(cl[b], ml[b], a, tgt, candidates, columns, cfg.loss_weights)
        used.append(per_image)
    l_new = l_new / len(targets)

    zero = images.new_zeros(())
    l_q = l_c = l_m = l_pod = zero
    if teacher is not None:
        tp = teacher(images)
        # groups are only ever appended, so the teacher's queries lead the queue
        old = list(range(tp.class_logits.shape[1]))
        k_old = tp.class_logits.shape[-1] - 1
        if ab.use_query_kd:
            l_q = query_kd([s[:, old] for s in preds.layer_query_states], tp.layer_query_states)
        if ab.use_class_kd:
            l_c = class_kd(preds.class_logits[:, old], tp.class_logits, k_old)
        if ab.use_mask_kd:
            l_m = mask_kd(preds.mask_logits[:, old], tp.mask_logits, cfg.loss_weights)
        if ab.use_pod_kd:
            l_pod = pod_kd(preds.pod_features, tp.pod_features, cfg.pod_scales)
    parts = LossBreakdown(l_new, l_q, l_c, l_m, l_pod)
    return total_loss(parts, cfg.loss_weights), used, preds


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: SegModel, cfg: TrainConfig, protocol: Protocol, step: int, batch: int = 32) -> dict:
    """Grouped mIoU (and AP50 in instance mode) on the step's test split."""
    images, _, labels, gt_inst = step_pool(cfg, protocol, step, "test")
    seen = protocol.seen_classes(step)
    base = protocol.step_classes(0)
    added = [c for c in seen if c not in base]
    column_classes = model.queue.class_ids
    # groups only own their classes when matching keeps them apart
    grouped = cfg.group_aware_inference and cfg.ablations.independent_match
    allowed = model.queue.column_mask() if grouped else None
    dtype = next(model.parameters()).dtype
    acc = IoUAccumulator(seen)
    inst_preds = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(images), batch):
            x = torch.from_numpy(images[lo : lo + batch]).to(dtype)
            preds = model(x)
            for b in range(x.shape[0]):
                cl, ml = preds.class_logits[b], preds.mask_logits[b]
                acc.update(semantic_inference(cl, ml, column_classes, allowed), labels[lo + b])
                if cfg.mode == "instance":
                    inst_preds.append(instance_inference(cl, ml, column_classes, allowed))
    model.train(was_training)
    per_class = acc.result()
    old, new, all_ = grouped_miou(per_class, base, added)
    out = {"per_class_iou": per_class, "miou_old": old, "miou_new": new, "miou_all": all_}
    if cfg.mode == "instance":
        ap = ap50_dataset(inst_preds, gt_inst, seen)

        def mean(cs):
            vals = [ap[c] for c in cs if c in ap]
            return float(np.mean(vals)) if vals else None

        out.update(ap50=mean(seen), ap50_old=mean(base), ap50_new=mean(added))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class ContinualResult:
    model: SegModel
    records: list[MetricsRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    old_queries_unchanged: dict[int, bool] = field(default_factory=dict)
    frozen_assignments: int = 0
    total_assignments: int = 0
    teacher_checksums: dict[int, str] = field(default_factory=dict)
    step_end_checksums: dict[int, str] = field(default_factory=dict)
    param_counts: dict[int, int] = field(default_factory=dict)


def build_model(cfg: TrainConfig) -> SegModel:
    model = SegModel(cfg.model, mode=cfg.mode, seed=sample_seed(cfg.seed, "model") % 2**31)
    return model.to(_DTYPES[cfg.dtype])


def protocol_for(cfg: TrainConfig) -> Protocol:
    return build_protocol(cfg.protocol, cfg.setting, cfg.class_order_seed)


def extend_for_step(model: SegModel, cfg: TrainConfig, protocol: Protocol, step: int):
    model.extend(protocol.step_classes(step), seed=sample_seed(cfg.seed, "queries", step),
                 freeze=cfg.ablations.freeze_queries)


def train_continual(
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> ContinualResult:
    """Run every protocol step.  ``resume_from`` is a step-end checkpoint."""
    protocol = protocol_for(cfg)
    chash = train_config_hash(cfg)
    dtype = _DTYPES[cfg.dtype]
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    first_step = 0

    if resume_from is not None:
        model, header = ckpt.load(resume_from, dtype)
        if header["config_hash"] != chash:
            raise ValueError(
                f"checkpoint config hash {header['config_hash']} != run config hash {chash}"
            )
        first_step = header["step"] + 1
    else:
        model = build_model(cfg)
    result = ContinualResult(model)

    # every step's data must be generatable before any training starts
    for step in range(first_step, protocol.steps):
        classes = protocol.step_classes(step)
        if not classes:
            raise ValueError(f"protocol step {step} has no classes")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")

    t0 = time.perf_counter()
    try:
        for step in range(first_step, protocol.steps):
            teacher = snapshot_teacher(model, step - 1) if step > 0 else None
            if teacher is not None:
                result.teacher_checksums[step] = teacher.checksum
            before = parameter_count(model)
            extend_for_step(model, cfg, protocol, step)
            result.param_counts[step] = parameter_count(model) - before
            old_idx = set(model.queue.old_indices())
            old_before = [
                (g.feature_embeddings.detach().clone(), g.positional_embeddings.detach().clone())
                for g in model.queue.groups[:-1]
            ]
            params = [p for p in model.parameters() if p.requires_grad]
            opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
            pool = step_pool(cfg, protocol, step, "train")
            step_classes = protocol.step_classes(step)
            model.train()
            interval: list[dict] = []
            drop_after = (
                math.ceil(cfg.lr_drop_at * cfg.steps_iterations) if cfg.lr_drop_at is not None else None
            )
            for it in range(1, cfg.steps_iterations + 1):
                if it - 1 == drop_after:
                    for group in opt.param_groups:
                        group["lr"] = cfg.learning_rate * cfg.lr_drop_factor
                images, targets = sample_batch(cfg, pool, step, it, dtype)
                losses, assigns, _ = compute_losses(model, teacher, images, targets, cfg, step_classes)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                opt.step()
                for a in (a for per_image in assigns for a in per_image):
                    result.total_assignments += len(a.pairs)
                    hits = [q for q in a.queries() if q in old_idx]
                    if hits:
                        result.frozen_assignments += len(hits)
                        if cfg.ablations.independent_match:
                            log.error("step %d iter %d: old queries %s matched", step, it, hits)
                interval.append(losses.as_floats())
                if it % cfg.eval_interval == 0:
                    ev = evaluate(model, cfg, protocol, step)
                    rec = MetricsRecord(
                        step=step,
                        iteration=it,
                        loss={k: float(np.mean([d[k] for d in interval])) for k in interval[0]},
                        param_count=parameter_count(model),
                        wall_clock=round(time.perf_counter() - t0, 3) if cfg.record_wall_clock else None,
                        config_hash=chash,
                        queue=model.queue.metadata(),
                        **ev,
                    )
                    interval = []
                    result.records.append(rec)
                    if metrics_fh is not None:
                        metrics_fh.write(rec.to_json() + "\n")
                        metrics_fh.flush()
                    if on_record is not None:
                        on_record(rec)
                    log.info("step %d iter %d miou_all=%s loss=%.4f", step, it,
                             rec.miou_all, rec.loss["total"])

            unchanged = all(
                torch.equal(f0, g.feature_embeddings) and torch.equal(p0, g.positional_embeddings)
                for (f0, p0), g in zip(old_before, model.queue.groups[:-1])
            )
            result.old_queries_unchanged[step] = unchanged
            if cfg.ablations.freeze_queries and not unchanged:
                raise AssertionError(f"step {step}: frozen query embeddings changed")
            if teacher is not None and state_checksum(teacher.model) != teacher.checksum:
                raise AssertionError(f"step {step}: teacher snapshot was mutated")
            result.step_end_checksums[step] = state_checksum(model)
            if out is not None:
                path = ckpt.save(out / "checkpoints" / f"step{step}.ckpt", model, step, chash,
                                 extra={"protocol": cfg.protocol})
                result.checkpoints.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result
