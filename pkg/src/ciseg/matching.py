"""Matching cost, Hungarian assignment and the group-restricted matcher."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import CostWeights

PROB_CLAMP = 1e-6
BRUTE_FORCE_LIMIT = 7
_TIE_TOL = 1e-9


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (query, ground truth)
    total_cost: float = 0.0

    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64).cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def pairwise_cost(
    class_logits,
    mask_logits,
    targets: Sequence[tuple[int, np.ndarray]],
    weights: CostWeights = CostWeights(),
    class_columns: dict[int, int] | None = None,
) -> np.ndarray:
    """Cost matrix (candidates x targets), computed in float64.

    ``class_logits`` is candidates x (K + 1); ``targets`` are (class id, mask).
    ``class_columns`` maps class ids to logit columns (identity if omitted).
    """
    logits = _as_numpy(class_logits)
    masks = _as_numpy(mask_logits)
    n, k1 = logits.shape
    if n < 1:
        raise ValueError("need at least one candidate query")
    if not targets:
        return np.zeros((n, 0))
    cols = []
    for cls, _ in targets:
        col = class_columns.get(cls) if class_columns is not None else cls
        if col is None or not 0 <= col < k1 - 1:
            raise ValueError(f"target class {cls} is not in the label space")
        cols.append(col)
    if any(np.shape(m) != masks.shape[1:] for _, m in targets):
        raise ValueError("target masks must match the prediction resolution")

    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    cost_class = -prob[:, cols]

    p = 1.0 / (1.0 + np.exp(-masks.reshape(n, -1)))
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.stack([np.asarray(m, dtype=np.float64).ravel() for _, m in targets])  # m x P
    npix = p.shape[1]
    cost_ce = -(np.log(p) @ t.T + np.log1p(-p) @ (1.0 - t).T) / npix
    numer = 2.0 * p @ t.T + 1.0
    denom = p.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + 1.0
    cost_dice = 1.0 - numer / denom
    cost = weights.w_class * cost_class + weights.w_ce * cost_ce + weights.w_dice * cost_dice
    if not np.all(np.isfinite(cost)):
        raise FloatingPointError("non-finite matching cost")
    return cost


def _solve(cost: np.ndarray) -> list[int]:
    """Column chosen for each row of a rows <= cols cost matrix."""
    if cost.shape[0] == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [int(c) for _, c in sorted(zip(rows, cols))]


def _total(cost: np.ndarray, sigma: Sequence[int]) -> float:
    return float(sum(cost[q, j] for j, q in enumerate(sigma)))


def hungarian(cost) -> Assignment:
    """Optimal injection of targets (columns) into queries (rows).

    Among optimal assignments the one with the lexicographically smallest
    query sequence (ordered by target) is returned.
    """
    c = _as_numpy(cost)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = c.shape
    if n < m:
        raise ValueError("more ground truths than candidate queries")
    if m == 0:
        return Assignment([], 0.0)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")

    ct = c.T  # targets as rows
    sigma = _solve(ct)
    best = _total(c, sigma)
    tol = _TIE_TOL * max(1.0, abs(best))

    # lexicographic refinement: fix targets one at a time to the smallest
    # query index that still admits an optimal completion
    fixed: list[int] = []
    for j in range(m):
        for q in range(n):
            if q in fixed:
                continue
            if q == sigma[j]:
                fixed.append(q)
                break
            if q > sigma[j]:
                continue
            rest_rows = list(range(j + 1, m))
            rest_cols = [r for r in range(n) if r not in fixed and r != q]
            sub = ct[np.ix_(rest_rows, rest_cols)] if rest_rows else np.zeros((0, len(rest_cols)))
            sub_sigma = _solve(sub) if rest_rows else []
            val = sum(c[fq, jj] for jj, fq in enumerate(fixed)) + c[q, j]
            val += sum(sub[r, s] for r, s in enumerate(sub_sigma))
            if val <= best + tol:
                fixed.append(q)
                sigma = fixed + [rest_cols[s] for s in sub_sigma]
                break
    return Assignment([(q, j) for j, q in enumerate(fixed)], _total(c, fixed))


@functools.lru_cache(maxsize=64)
def _injections(n: int, m: int) -> np.ndarray:
    # itertools yields these in lexicographic order, which the tie rule relies on
    return np.array(list(itertools.permutations(range(n), m)), dtype=np.intp).reshape(-1, m)


def brute_force_match(cost) -> Assignment:
    """Exhaustive oracle; same tie rule as ``hungarian``."""
    c = _as_numpy(cost)
    n, m = c.shape
    if m > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} targets, got {m}")
    if n < m:
        raise ValueError("more ground truths than candidate queries")
    if m == 0:
        return Assignment([], 0.0)
    sigmas = _injections(n, m)
    totals = c[sigmas, np.arange(m)].sum(axis=1)
    best = totals.min()
    first = int(np.flatnonzero(totals <= best + _TIE_TOL * max(1.0, abs(best)))[0])
    sigma = [int(q) for q in sigmas[first]]
    return Assignment([(q, j) for j, q in enumerate(sigma)], _total(c, sigma))


def match_step(
    class_logits,
    mask_logits,
    targets: Sequence[tuple[int, np.ndarray]],
    candidates: Sequence[int],
    weights: CostWeights = CostWeights(),
    class_columns: dict[int, int] | None = None,
    allowed_classes: Sequence[int] | None = None,
) -> Assignment:
    """Match targets against the candidate rows only; returns global query indices.

    ``class_logits`` and ``mask_logits`` cover all queries of one image.
    With independent matching, ``candidates`` is the newest group and
    ``allowed_classes`` its classes.
    """
    if allowed_classes is not None:
        allowed = set(allowed_classes)
        stale = sorted({c for c, _ in targets if c not in allowed})
        if stale:
            raise ValueError(
                f"targets reference classes {stale} outside the current step; "
                "they belong to the background at this step"
            )
    cand = list(candidates)
    if not targets:
        return Assignment([], 0.0)
    cost = pairwise_cost(class_logits[cand], mask_logits[cand], targets, weights, class_columns)
    local = hungarian(cost)
    return Assignment([(cand[q], j) for q, j in local.pairs], local.total_cost)
