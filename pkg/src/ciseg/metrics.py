"""IoU / grouped mIoU, semantic and instance inference, AP50 and forgetting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import BACKGROUND

IOU_THRESHOLD = 0.5


@dataclass
class MetricsRecord:
    step: int
    iteration: int
    per_class_iou: dict[int, float] = field(default_factory=dict)
    miou_old: float | None = None
    miou_new: float | None = None
    miou_all: float | None = None
    ap50: float | None = None
    ap50_old: float | None = None
    ap50_new: float | None = None
    loss: dict[str, float] = field(default_factory=dict)
    param_count: int = 0
    wall_clock: float | None = None
    config_hash: str = ""
    queue: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in sorted(self.per_class_iou.items())}
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        d["per_class_iou"] = {int(k): v for k, v in d["per_class_iou"].items()}
        return cls(**d)


class IoUAccumulator:
    """Sums intersections and unions over a test set."""

    def __init__(self, class_set: Iterable[int]):
        self.classes = [int(c) for c in class_set]
        self.inter = {c: 0 for c in self.classes}
        self.union = {c: 0 for c in self.classes}

    def update(self, pred: np.ndarray, gt: np.ndarray):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
        for c in self.classes:
            p, g = pred == c, gt == c
            self.inter[c] += int(np.count_nonzero(p & g))
            self.union[c] += int(np.count_nonzero(p | g))

    def result(self) -> dict[int, float]:
        # classes never seen in either map are excluded
        return {c: self.inter[c] / self.union[c] for c in self.classes if self.union[c] > 0}


def iou_per_class(pred_labels, gt_labels, class_set) -> dict[int, float]:
    acc = IoUAccumulator(class_set)
    acc.update(pred_labels, gt_labels)
    return acc.result()


def grouped_miou(per_class: dict[int, float], old_classes, new_classes) -> tuple[float | None, float | None, float | None]:
    """(old, new, all) means over evaluated classes; None for an empty group."""

    def mean(cs):
        vals = [per_class[c] for c in cs if c in per_class]
        return float(np.mean(vals)) if vals else None

    return mean(old_classes), mean(new_classes), mean(list(old_classes) + list(new_classes))


def _restrict(class_logits, allowed):
    logits = torch.as_tensor(class_logits).detach().double()
    if allowed is None:
        return logits
    return logits.masked_fill(~torch.as_tensor(allowed, dtype=torch.bool), float("-inf"))


def _column_scores(class_logits: torch.Tensor, mask_logits: torch.Tensor):
    probs = class_logits.detach().double().softmax(-1)[..., :-1]  # M x K
    masks = mask_logits.detach().double().sigmoid()  # M x H x W
    return probs, masks


def semantic_inference(class_logits, mask_logits, column_classes: Sequence[int], allowed=None) -> np.ndarray:
    """Per-pixel argmax of p_i(c) * sigmoid(mask_i) over queries and classes.

    ``column_classes[k]`` is the class id of logit column k.  Pixels whose best
    score is below half the maximum attainable score (1.0) are background;
    equal scores go to the lowest class id.  ``allowed`` (M x K+1 bool, see
    ``QueryQueue.column_mask``) limits the softmax of each query to its columns.
    """
    probs, masks = _column_scores(_restrict(class_logits, allowed), torch.as_tensor(mask_logits))
    k = probs.shape[-1]
    h, w = masks.shape[-2:]
    if k == 0:
        return np.full((h, w), BACKGROUND, dtype=np.int64)
    # best query per class, then best class (columns visited in class-id order)
    scores = torch.einsum("mk,mhw->mkhw", probs, masks).amax(dim=0).numpy()  # K x H x W
    order = np.argsort(np.asarray(column_classes), kind="stable")
    sorted_scores = scores[order]
    best = sorted_scores.argmax(axis=0)  # argmax returns the first maximum
    best_score = sorted_scores.max(axis=0)
    labels = np.asarray(column_classes)[order][best]
    return np.where(best_score >= 0.5, labels, BACKGROUND).astype(np.int64)


def instance_inference(class_logits, mask_logits, column_classes: Sequence[int], allowed=None):
    """One candidate per query: (class id, binary mask, score).

    Score is the class probability times the mean mask probability inside
    the predicted mask.  Queries predicting no-object or an empty mask are dropped.
    """
    logits = _restrict(class_logits, allowed)
    full = logits.softmax(-1)
    probs, masks = _column_scores(logits, torch.as_tensor(mask_logits))
    out = []
    for i in range(probs.shape[0]):
        k = int(probs[i].argmax())
        if full[i, -1] >= full[i, k]:
            continue
        binary = masks[i] > 0.5
        n = int(binary.sum())
        if n == 0:
            continue
        score = float(probs[i, k] * masks[i][binary].mean())
        out.append((int(column_classes[k]), binary.numpy(), score))
    return out


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def ap50_dataset(per_image_preds, per_image_gts, classes: Iterable[int] | None = None) -> dict[int, float]:
    """Per-class AP at IoU 0.5 with all-point interpolation over many images."""
    gt_count: dict[int, int] = {}
    for gts in per_image_gts:
        for c, _ in gts:
            gt_count[c] = gt_count.get(c, 0) + 1
    wanted = set(gt_count) if classes is None else {c for c in classes if gt_count.get(c)}
    out = {}
    for c in sorted(wanted):
        dets = []  # (score, image, mask)
        for img, preds in enumerate(per_image_preds):
            for pc, mask, score in preds:
                if pc == c:
                    dets.append((score, img, np.asarray(mask, bool)))
        dets.sort(key=lambda d: -d[0])  # stable: ties keep input order
        used = {}
        tp = np.zeros(len(dets))
        for n, (_, img, mask) in enumerate(dets):
            gts = [(k, np.asarray(m, bool)) for k, (gc, m) in enumerate(per_image_gts[img]) if gc == c]
            taken = used.setdefault(img, set())
            best, best_k = IOU_THRESHOLD, None
            for k, gm in gts:
                if k in taken:
                    continue
                iou = _mask_iou(mask, gm)
                if iou >= best:
                    best, best_k = iou, k
            if best_k is not None:
                taken.add(best_k)
                tp[n] = 1
        out[c] = _average_precision(tp, gt_count[c])
    return out


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap50(pred_instances, gt_instances, classes: Iterable[int] | None = None) -> float:
    """Mean AP50 over classes with at least one ground truth, for a single image.

    Use ``ap50_dataset`` to pool several images.
    """
    per_class = ap50_dataset([pred_instances], [gt_instances], classes)
    return float(np.mean(list(per_class.values()))) if per_class else 0.0


def forgetting(history: Sequence[MetricsRecord]) -> dict[int, float]:
    """Best IoU over earlier records minus final IoU, per class seen before the end."""
    if len(history) < 2:
        raise ValueError("need at least two evaluated steps")
    final = history[-1].per_class_iou
    out = {}
    for c, v in final.items():
        past = [r.per_class_iou[c] for r in history[:-1] if c in r.per_class_iou]
        if past:
            out[c] = max(past) - v
    return out


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]
