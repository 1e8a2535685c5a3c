import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ciseg.config import CostWeights
from ciseg.matching import (
    brute_force_match,
    hungarian,
    match_step,
    pairwise_cost,
)
from ciseg.queue import QueryQueue


def _enumerate_min(cost):
    """Plain permutation enumeration, kept separate from brute_force_match."""
    n, m = cost.shape
    return min(sum(cost[q, j] for j, q in enumerate(p)) for p in itertools.permutations(range(n), m))


def test_single_cell():
    for solver in (hungarian, brute_force_match):
        a = solver(np.array([[0.0]]))
        assert a.pairs == [(0, 0)]
        assert a.total_cost == 0.0


def test_two_by_two():
    cost = np.array([[1.0, 2.0], [2.0, 1.0]])
    assert _enumerate_min(cost) == 2.0
    for solver in (hungarian, brute_force_match):
        a = solver(cost)
        assert sorted(a.pairs) == [(0, 0), (1, 1)]
        assert a.total_cost == 2.0


def test_identity_cost_seven():
    cost = 1.0 - np.eye(7)
    a = brute_force_match(cost)
    assert a.pairs == [(i, i) for i in range(7)]
    assert a.total_cost == 0.0
    assert hungarian(cost).pairs == a.pairs


def test_random_six_by_six_against_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        cost = rng.normal(size=(6, 6))
        h = hungarian(cost)
        assert h.total_cost == brute_force_match(cost).total_cost
        assert h.total_cost == pytest.approx(_enumerate_min(cost), abs=1e-12)


def test_ties_broken_lexicographically():
    cost = np.zeros((3, 2))
    assert hungarian(cost).pairs == [(0, 0), (1, 1)]
    assert brute_force_match(cost).pairs == [(0, 0), (1, 1)]
    cost = np.array([[5.0, 1.0], [1.0, 5.0], [1.0, 1.0]])
    # optimum 2.0 is reached by (2,0),(0,1) and (1,0),(0,1) and (1,0),(2,1)
    assert hungarian(cost).pairs == brute_force_match(cost).pairs == [(1, 0), (0, 1)]


def test_rejections():
    with pytest.raises(ValueError, match="more ground truths"):
        hungarian(np.zeros((1, 2)))
    with pytest.raises(ValueError, match="limited"):
        brute_force_match(np.zeros((8, 8)))


def test_empty_targets():
    a = hungarian(np.zeros((3, 0)))
    assert a.pairs == [] and a.total_cost == 0.0


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 7),
    m=st.integers(0, 7),
    seed=st.integers(0, 2**32 - 1),
    shift=st.floats(-100, 100, allow_nan=False),
)
def test_constant_shift(n, m, seed, shift):
    m = min(m, n)
    cost = np.random.default_rng(seed).uniform(size=(n, m))
    a, b = hungarian(cost), hungarian(cost + shift)
    assert a.pairs == b.pairs
    assert b.total_cost == pytest.approx(a.total_cost + m * shift, abs=1e-9)


def _hard_mask(h, w, box):
    m = np.zeros((h, w), bool)
    r0, r1, c0, c1 = box
    m[r0:r1, c0:c1] = True
    return m


def test_cost_at_saturation():
    mask = _hard_mask(4, 4, (0, 2, 0, 4))
    logits = torch.tensor([[50.0, -50.0, -50.0]])
    mask_logits = torch.where(torch.from_numpy(mask), 50.0, -50.0)[None]
    cost = pairwise_cost(logits, mask_logits, [(0, mask)])
    # p = 1, BCE at the clamp is ~1e-6, dice with eps=1 is exactly 0
    assert cost[0, 0] == pytest.approx(-2.0, abs=1e-4)


def test_cost_identical_rows():
    rng = np.random.default_rng(0)
    row = torch.tensor(rng.normal(size=(1, 4)))
    ml = torch.tensor(rng.normal(size=(1, 5, 5)))
    cost = pairwise_cost(torch.cat([row, row]), torch.cat([ml, ml]), [(1, rng.random((5, 5)) > 0.5)])
    assert cost[0, 0] == cost[1, 0]


def test_cost_entries_match_scalar_recomputation():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 4))
    masks = rng.normal(size=(3, 6, 6))
    targets = [(c, rng.random((6, 6)) > 0.5) for c in (0, 2, 1)]
    w = CostWeights()
    cost = pairwise_cost(torch.tensor(logits), torch.tensor(masks), targets, w)
    assert np.all(np.isfinite(cost))
    for i in range(3):
        e = np.exp(logits[i] - logits[i].max())
        p_cls = e / e.sum()
        for j, (c, t) in enumerate(targets):
            bce = dice_num = p_sum = 0.0
            t_sum = float(t.sum())
            for r in range(6):
                for col in range(6):
                    p = 1.0 / (1.0 + np.exp(-masks[i, r, col]))
                    p = min(max(p, 1e-6), 1 - 1e-6)
                    y = float(t[r, col])
                    bce += -(y * np.log(p) + (1 - y) * np.log(1 - p))
                    dice_num += p * y
                    p_sum += p
            bce /= 36
            dice = 1 - (2 * dice_num + 1) / (p_sum + t_sum + 1)
            expected = -w.w_class * p_cls[c] + w.w_ce * bce + w.w_dice * dice
            assert cost[i, j] == pytest.approx(expected, rel=1e-10)


def test_cost_rejects_unknown_class():
    with pytest.raises(ValueError, match="label space"):
        pairwise_cost(torch.zeros(2, 3), torch.zeros(2, 4, 4), [(5, np.ones((4, 4), bool))])


def _queue(sizes):
    q = QueryQueue(d_q=4)
    start = 0
    for s in sizes:
        q.extend(range(start, start + s))
        start += s
    return q


def test_match_step_restricted_to_newest_group():
    q = _queue([4, 2])
    rng = np.random.default_rng(1)
    logits = torch.tensor(rng.normal(size=(6, 7)))
    masks = torch.tensor(rng.normal(size=(6, 8, 8)))
    a = match_step(logits, masks, [(4, rng.random((8, 8)) > 0.5)], q.newest_indices(),
                   allowed_classes=q.groups[-1].class_ids)
    assert len(a.pairs) == 1
    assert a.pairs[0][0] in {4, 5}


def test_match_step_step_zero_equals_unrestricted():
    q = _queue([4])
    rng = np.random.default_rng(2)
    logits = torch.tensor(rng.normal(size=(4, 5)))
    masks = torch.tensor(rng.normal(size=(4, 8, 8)))
    targets = [(c, rng.random((8, 8)) > 0.5) for c in (0, 3)]
    a = match_step(logits, masks, targets, q.newest_indices())
    assert a.pairs == hungarian(pairwise_cost(logits, masks, targets)).pairs


def test_match_step_against_submatrix_oracle():
    q = _queue([4, 3])
    rng = np.random.default_rng(4)
    logits = torch.tensor(rng.normal(size=(7, 8)))
    masks = torch.tensor(rng.normal(size=(7, 8, 8)))
    targets = [(c, rng.random((8, 8)) > 0.5) for c in (4, 5, 6)]
    a = match_step(logits, masks, targets, q.newest_indices())
    sub = pairwise_cost(logits[4:], masks[4:], targets)
    oracle = brute_force_match(sub)
    assert a.pairs == [(4 + i, j) for i, j in oracle.pairs]
    assert a.total_cost == oracle.total_cost


def test_match_step_rejects_old_class():
    q = _queue([4, 2])
    with pytest.raises(ValueError, match="background"):
        match_step(torch.zeros(6, 7), torch.zeros(6, 4, 4), [(1, np.ones((4, 4), bool))],
                   q.newest_indices(), allowed_classes=q.groups[-1].class_ids)


def test_match_step_never_emits_frozen_query():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))]
        q = _queue(sizes)
        new = q.newest_indices()
        n_t = int(rng.integers(0, len(new) + 1))
        k = sum(sizes)
        logits = torch.tensor(rng.normal(size=(k, k + 1)))
        masks = torch.tensor(rng.normal(size=(k, 4, 4)))
        classes = q.groups[-1].class_ids
        targets = [(int(rng.choice(classes)), rng.random((4, 4)) > 0.5) for _ in range(n_t)]
        a = match_step(logits, masks, targets, new, allowed_classes=classes)
        assert not set(a.queries()) & q.frozen_index_set()
        assert len(a.pairs) == n_t
