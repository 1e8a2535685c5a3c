import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ciseg.config import LossWeights
from ciseg.losses import (
    LossBreakdown,
    class_kd,
    dice_loss,
    mask_kd,
    mask_kd_floor,
    pod_embedding,
    pod_kd,
    query_kd,
    supervised_loss,
    total_loss,
)
from ciseg.matching import Assignment

W = LossWeights()


# ---- dice


def test_dice_identical_hard_masks():
    t = torch.zeros(4, 4)
    t[:2, :2] = 1
    assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_disjoint_two_pixel_masks():
    p = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
    t = torch.tensor([[0.0, 0.0, 1.0, 1.0]])
    # 1 - (0 + 1) / (2 + 2 + 1)
    assert dice_loss(p, t).item() == pytest.approx(0.8)


def test_dice_empty_masks():
    z = torch.zeros(3, 3)
    assert dice_loss(z, z).item() == 0.0


# ---- supervised


def test_supervised_hand_computed_mask_terms():
    # one match, p = 0.5 everywhere on 2x2, target half ones
    target = np.array([[1, 1], [0, 0]], bool)
    class_logits = torch.tensor([[100.0, -100.0]])  # saturated on the right class
    mask_logits = torch.zeros(1, 2, 2)
    a = Assignment([(0, 0)], 0.0)
    loss = supervised_loss(class_logits, mask_logits, a, [(7, target)], [0], {7: 0}, W)
    bce = math.log(2)
    dice = 1 - (2 * (0.5 * 2) + 1) / (2 + 2 + 1)  # eps = 1
    assert loss.item() == pytest.approx(W.lambda_c * bce + W.lambda_d * dice, abs=1e-6)
    # without smoothing the dice would be 0.5
    assert dice_loss(torch.full((2, 2), 0.5), torch.from_numpy(target).float(), eps=0.0).item() == pytest.approx(0.5)


def test_supervised_perfect_predictions():
    target = np.zeros((4, 4), bool)
    target[1:3, 1:3] = True
    class_logits = torch.tensor([[60.0, -60.0, -60.0], [-60.0, -60.0, 60.0]])
    mask_logits = torch.where(torch.from_numpy(target), 60.0, -60.0).expand(2, 4, 4)
    a = Assignment([(0, 0)], 0.0)
    loss = supervised_loss(class_logits, mask_logits, a, [(3, target)], [0, 1], {3: 0, 4: 1}, W)
    assert loss.item() <= 1e-5 + W.lambda_d * (1 - (2 * 4 + 1) / (8 + 1))


def test_supervised_no_targets_is_no_object_ce_over_new_queries():
    class_logits = torch.tensor([[1.0, 0.0, 2.0], [0.5, 0.5, 0.0], [9.0, 9.0, -9.0]])
    loss = supervised_loss(class_logits, torch.zeros(3, 2, 2), Assignment(), [], [0, 1], {0: 0, 1: 1}, W)
    expected = torch.nn.functional.cross_entropy(class_logits[:2], torch.tensor([2, 2]))
    assert loss.item() == pytest.approx(expected.item())


def test_class_ce_weight_scales_only_the_classification_part():
    target = np.array([[1, 0], [0, 0]], bool)
    class_logits = torch.tensor([[0.3, -0.2, 0.1], [1.0, 0.0, 0.5]])
    mask_logits = torch.randn(2, 2, 2, generator=torch.Generator().manual_seed(0))
    args = (class_logits, mask_logits, Assignment([(1, 0)], 0.0), [(4, target)], [0, 1], {4: 0, 5: 1})
    one = supervised_loss(*args, LossWeights(lambda_ce=1.0)).item()
    three = supervised_loss(*args, LossWeights(lambda_ce=3.0)).item()
    masks_only = supervised_loss(*args, LossWeights(lambda_ce=0.0)).item()
    assert three - masks_only == pytest.approx(3 * (one - masks_only), rel=1e-6)


def test_supervised_rejects_frozen_query():
    with pytest.raises(ValueError, match="frozen"):
        supervised_loss(torch.zeros(3, 3), torch.zeros(3, 2, 2), Assignment([(0, 0)]),
                        [(0, np.ones((2, 2), bool))], [1, 2], {0: 0}, W)


# ---- query KD


def test_query_kd_values():
    s = torch.randn(2, 3, 8)
    assert query_kd(s, s).item() == 0.0
    assert query_kd(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[[0.0, 1.0]]])).item() == 2.0


@given(alpha=st.floats(0.1, 10))
def test_query_kd_homogeneous(alpha):
    g = torch.Generator().manual_seed(0)
    s, t = torch.randn(2, 3, 4, generator=g, dtype=torch.float64), torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    assert query_kd(alpha * s, alpha * t).item() == pytest.approx(alpha**2 * query_kd(s, t).item(), rel=1e-9)


def test_query_kd_shape_mismatch():
    with pytest.raises(ValueError):
        query_kd(torch.zeros(1, 2, 3), torch.zeros(1, 3, 3))


# ---- class KD


def test_class_kd_identity_and_hand_value():
    x = torch.randn(4, 6)
    assert class_kd(x, x, 5).item() == pytest.approx(0.0, abs=1e-7)
    # teacher p = [1, 0] over (class, no-object); student uniform
    teacher = torch.tensor([[1e4, 0.0]])
    student = torch.tensor([[0.0, 0.0]])
    assert class_kd(student, teacher, 1).item() == pytest.approx(math.log(2), abs=1e-6)


def test_class_kd_nonnegative_random():
    g = torch.Generator().manual_seed(1)
    for _ in range(1000):
        s = torch.randn(3, 5, generator=g) * 3
        t = torch.randn(3, 5, generator=g) * 3
        assert class_kd(s, t, 2).item() >= -1e-6


def test_class_kd_ignores_new_columns():
    t = torch.randn(2, 4)  # 3 old classes + no-object
    s = torch.cat([t[:, :3], torch.randn(2, 2), t[:, 3:]], dim=1)
    assert class_kd(s, t, 3).item() == pytest.approx(0.0, abs=1e-6)


# ---- mask KD


def test_mask_kd_zero_logits_floor():
    z = torch.zeros(2, 4, 4, dtype=torch.float64)
    n = 16
    expected = W.lambda_c * math.log(2) + W.lambda_d * (1 - (2 * 0.25 * n + 1) / (2 * 0.5 * n + 1))
    assert mask_kd(z, z).item() == pytest.approx(expected, rel=1e-12)
    assert mask_kd_floor(z).item() == pytest.approx(expected, rel=1e-12)


def test_mask_kd_saturated():
    t = torch.where(torch.rand(3, 5, 5) > 0.5, 40.0, -40.0).double()
    assert mask_kd(t, t).item() <= 1e-5


def test_mask_kd_linear_in_bce_weight():
    g = torch.Generator().manual_seed(2)
    s, t = torch.randn(2, 4, 4, generator=g, dtype=torch.float64), torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    w1 = LossWeights(lambda_c=1.0, lambda_d=0.0)
    w2 = LossWeights(lambda_c=2.0, lambda_d=0.0)
    assert mask_kd(s, t, w2).item() == pytest.approx(2 * mask_kd(s, t, w1).item(), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 8.0))
def test_mask_kd_floor_matches_identity(seed, scale):
    t = torch.randn(3, 6, 6, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    assert mask_kd(t, t).item() == pytest.approx(mask_kd_floor(t).item(), rel=1e-10, abs=1e-12)


# ---- POD


def test_pod_hand_value():
    teacher = [torch.zeros(1, 2, 2)]
    student = [torch.ones(1, 2, 2)]
    emb = pod_embedding(student[0], [1])
    assert emb.tolist() == [1.0, 1.0, 1.0, 1.0]
    assert pod_kd(student, teacher, [1]).item() == pytest.approx(1.0)


def test_pod_identity_and_channel_permutation():
    g = torch.Generator().manual_seed(3)
    s = [torch.randn(2, 4, 8, 8, generator=g), torch.randn(2, 6, 4, 4, generator=g)]
    t = [torch.randn(2, 4, 8, 8, generator=g), torch.randn(2, 6, 4, 4, generator=g)]
    assert pod_kd(s, s).item() == 0.0
    perm = [torch.randperm(4, generator=g), torch.randperm(6, generator=g)]
    sp = [x[:, p] for x, p in zip(s, perm)]
    tp = [x[:, p] for x, p in zip(t, perm)]
    assert pod_kd(sp, tp).item() == pytest.approx(pod_kd(s, t).item(), rel=1e-5)


def test_pod_rejects_indivisible_scale():
    with pytest.raises(ValueError, match="level 1.*scale 2"):
        pod_kd([torch.zeros(1, 4, 4), torch.zeros(1, 3, 3)], [torch.zeros(1, 4, 4), torch.zeros(1, 3, 3)], [1, 2])


# ---- total


def test_total_loss_examples():
    assert total_loss(LossBreakdown(l_new=1.5)).total == 1.5
    out = total_loss(LossBreakdown(1.0, 0.1, 0.2, 0.01, 0.02))
    assert out.total == pytest.approx(7.1)
    assert total_loss(LossBreakdown()).total == 0.0


def test_total_loss_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="l_c"):
        total_loss(LossBreakdown(1.0, 0.0, float("nan"), 0.0, 0.0))


@given(
    parts=st.tuples(*[st.floats(0, 10)] * 5),
    lam=st.floats(0, 500),
    which=st.sampled_from(["lambda1", "lambda2", "lambda3", "lambda4"]),
)
def test_total_linear_in_each_lambda(parts, lam, which):
    comp = LossBreakdown(*parts)
    base = LossWeights(**{which: 0.0})
    one = LossWeights(**{which: 1.0})
    scaled = LossWeights(**{which: lam})
    t0 = total_loss(comp, base).total
    t1 = total_loss(comp, one).total
    assert total_loss(comp, scaled).total == pytest.approx(t0 + lam * (t1 - t0), rel=1e-9, abs=1e-9)
