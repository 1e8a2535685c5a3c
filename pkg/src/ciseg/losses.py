"""Supervised loss for the current step and the four distillation terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossWeights
from .matching import Assignment

DICE_EPS = 1.0
KL_CLAMP = 1e-8


@dataclass
class LossBreakdown:
    l_new: float | torch.Tensor = 0.0
    l_q: float | torch.Tensor = 0.0
    l_c: float | torch.Tensor = 0.0
    l_m: float | torch.Tensor = 0.0
    l_pod: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice over the trailing spatial axes; leading axes are kept."""
    if pred_probs.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred_probs.shape)} vs {tuple(target.shape)}")
    p = pred_probs.flatten(start_dim=pred_probs.dim() - 2) if pred_probs.dim() >= 2 else pred_probs
    t = target.flatten(start_dim=target.dim() - 2) if target.dim() >= 2 else target
    t = t.to(p.dtype)
    numer = 2.0 * (p * t).sum(-1) + eps
    denom = p.sum(-1) + t.sum(-1) + eps
    return 1.0 - numer / denom


def _bce_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-mask mean BCE between sigmoid(logits) and (soft) targets."""
    per_pixel = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    return per_pixel.flatten(start_dim=per_pixel.dim() - 2).mean(-1)


def supervised_loss(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    assignment: Assignment,
    targets: Sequence[tuple[int, np.ndarray]],
    supervised_queries: Sequence[int],
    class_columns: dict[int, int],
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Cross-entropy over the supervised queries plus BCE/dice on matched masks.

    Supervised queries that are not matched are pushed to no-object; every
    other query is left out of the loss.
    """
    sup = list(supervised_queries)
    allowed = set(sup)
    bad = [q for q, _ in assignment.pairs if q not in allowed]
    if bad:
        raise ValueError(f"assignment references unsupervised (frozen) queries {bad}")
    no_object = class_logits.shape[-1] - 1
    labels = {q: no_object for q in sup}
    for q, j in assignment.pairs:
        labels[q] = class_columns[targets[j][0]]
    idx = torch.tensor(sup, dtype=torch.long)
    lab = torch.tensor([labels[q] for q in sup], dtype=torch.long)
    class_weight = torch.ones(class_logits.shape[-1], dtype=class_logits.dtype)
    class_weight[-1] = weights.no_object_weight
    loss = weights.lambda_ce * F.cross_entropy(class_logits[idx], lab, weight=class_weight)
    if assignment.pairs:
        q_idx = torch.tensor([q for q, _ in assignment.pairs], dtype=torch.long)
        tgt = torch.stack([torch.as_tensor(np.asarray(targets[j][1])) for _, j in assignment.pairs])
        tgt = tgt.to(mask_logits.dtype)
        pred = mask_logits[q_idx]
        bce = _bce_logits(pred, tgt).mean()
        dice = dice_loss(pred.sigmoid(), tgt).mean()
        loss = loss + weights.lambda_c * bce + weights.lambda_d * dice
    return loss


def query_kd(student_states, teacher_states) -> torch.Tensor:
    """Mean over layers and queries of squared L2 distance between decoder states.

    Inputs are sequences of L tensors (or one L x M x d tensor); a leading
    batch axis inside each layer tensor is averaged as well.
    """
    s = torch.stack(list(student_states)) if not torch.is_tensor(student_states) else student_states
    t = torch.stack(list(teacher_states)) if not torch.is_tensor(teacher_states) else teacher_states
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
    if s.numel() == 0:
        return s.sum()
    return ((s - t) ** 2).sum(-1).mean()


def class_kd(student_logits: torch.Tensor, teacher_logits: torch.Tensor, old_class_count: int) -> torch.Tensor:
    """KL(teacher || student) per old query over old classes + no-object, summed over queries.

    A leading batch axis is averaged.
    """
    if old_class_count < 1:
        raise ValueError("old_class_count must be >= 1")
    cols = list(range(old_class_count)) + [student_logits.shape[-1] - 1]
    tcols = list(range(old_class_count)) + [teacher_logits.shape[-1] - 1]
    ps = student_logits[..., cols].softmax(-1).clamp_min(KL_CLAMP)
    pt = teacher_logits[..., tcols].softmax(-1).clamp_min(KL_CLAMP)
    kl = (pt * (pt.log() - ps.log())).sum(-1).sum(-1)
    return kl.mean() if kl.dim() else kl


def mask_kd(student_masks: torch.Tensor, teacher_masks: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Soft-target BCE + dice between student and teacher masks, averaged per query."""
    if student_masks.shape != teacher_masks.shape:
        raise ValueError(
            f"shape mismatch {tuple(student_masks.shape)} vs {tuple(teacher_masks.shape)}"
        )
    target = teacher_masks.sigmoid()
    bce = _bce_logits(student_masks, target).mean()
    dice = dice_loss(student_masks.sigmoid(), target).mean()
    return weights.lambda_c * bce + weights.lambda_d * dice


def mask_kd_floor(teacher_masks: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Closed-form value of mask_kd when the student reproduces the teacher.

    BCE against soft targets bottoms out at the teacher's binary entropy, and
    soft dice against itself is 1 - (2 sum p^2 + eps) / (2 sum p + eps), which
    vanishes only for hard masks.
    """
    p = teacher_masks.sigmoid()
    ent = -(torch.xlogy(p, p) + torch.xlogy(1 - p, 1 - p))
    per_mask_ent = ent.flatten(start_dim=ent.dim() - 2).mean(-1)
    flat = p.flatten(start_dim=p.dim() - 2)
    self_dice = 1.0 - (2.0 * (flat**2).sum(-1) + DICE_EPS) / (2.0 * flat.sum(-1) + DICE_EPS)
    return weights.lambda_c * per_mask_ent.mean() + weights.lambda_d * self_dice.mean()


def pod_embedding(x: torch.Tensor, scales: Sequence[int] = (1, 2), level: int = 0) -> torch.Tensor:
    """Local POD descriptor of a C x H x W (or B x C x H x W) map.

    For each scale s the map is cut into an s x s grid; each cell contributes
    its width-pooled and height-pooled profiles.  Output is flattened per sample.
    """
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    parts = []
    for s in scales:
        if h % s or w % s:
            raise ValueError(f"level {level}: spatial size {h}x{w} not divisible by scale {s}")
        ch, cw = h // s, w // s
        cells = x.reshape(b, c, s, ch, s, cw)
        width_pooled = cells.mean(dim=5)  # b c s ch s
        height_pooled = cells.mean(dim=3)  # b c s s cw
        parts.append(width_pooled.reshape(b, -1))
        parts.append(height_pooled.reshape(b, -1))
    emb = torch.cat(parts, dim=1)
    return emb if batched else emb[0]


def pod_kd(student_features, teacher_features, scales: Sequence[int] = (1, 2)) -> torch.Tensor:
    """Mean over levels of squared distance between unit-normalised POD embeddings."""
    if len(student_features) != len(teacher_features):
        raise ValueError("feature lists differ in length")
    if not student_features:
        raise ValueError("no feature levels given")
    losses = []
    for level, (s, t) in enumerate(zip(student_features, teacher_features)):
        if s.shape != t.shape:
            raise ValueError(f"level {level}: shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        es = _unit(pod_embedding(s, scales, level))
        et = _unit(pod_embedding(t, scales, level))
        losses.append(((es - et) ** 2).sum(-1).mean())
    return torch.stack(losses).mean()


def _unit(e: torch.Tensor) -> torch.Tensor:
    # zero vectors stay zero instead of producing NaN
    norm = e.norm(dim=-1, keepdim=True)
    return e / torch.where(norm > 0, norm, torch.ones_like(norm))


def total_loss(components: LossBreakdown, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum; a non-finite component is rejected by name."""
    for name in ("l_new", "l_q", "l_c", "l_m", "l_pod"):
        val = float(torch.as_tensor(getattr(components, name)).detach())
        if not math.isfinite(val):
            raise FloatingPointError(f"component {name} is not finite ({val})")
    total = (
        components.l_new
        + weights.lambda1 * components.l_q
        + weights.lambda2 * components.l_c
        + weights.lambda3 * components.l_m
        + weights.lambda4 * components.l_pod
    )
    return LossBreakdown(
        components.l_new, components.l_q, components.l_c, components.l_m, components.l_pod, total
    )
