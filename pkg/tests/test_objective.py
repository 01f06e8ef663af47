import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sattca.objective import (
    LossWeights,
    bce,
    click_loss,
    entropy,
    masked_prediction,
    soft_dice,
    train_loss,
    tt_loss,
    tt_loss_components,
)

CLAMP = 1e-7


def summation_bce(probs, target, clamp=CLAMP):
    """Direct per-voxel summation, no vectorization."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    total = 0.0
    for pi, ti in zip(p, t):
        pc = min(max(pi, clamp), 1.0 - clamp)
        total += -(ti * math.log(pc) + (1 - ti) * math.log(1 - pc))
    return total / len(p)


def summation_dice(probs, target, eps=1e-5):
    p = np.asarray(probs, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    inter = sum(pi * ti for pi, ti in zip(p, t))
    return 1.0 - (2.0 * inter + eps) / (sum(p) + sum(t) + eps)


class TestBce:
    def test_perfect_prediction_is_near_zero(self):
        t = np.zeros((3, 3, 3))
        t[1, 1, 1] = 1.0
        assert float(bce(t, t)) <= -math.log(1 - CLAMP) + 1e-12

    def test_half_probability_is_log_two(self):
        p = np.full((4, 4, 4), 0.5)
        t = np.zeros((4, 4, 4))
        assert float(bce(p, t)) == pytest.approx(math.log(2), abs=1e-9)

    def test_single_voxel_analytic(self):
        val = float(bce(np.array([[[0.9]]]), np.array([[[1.0]]])))
        assert val == pytest.approx(-math.log(0.9), rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bce(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_summation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((3, 4, 2))
        t = (rng.random((3, 4, 2)) < 0.5).astype(np.float64)
        assert float(bce(p, t)) == pytest.approx(summation_bce(p, t), rel=1e-6)


class TestSoftDice:
    def test_perfect_overlap_near_zero(self):
        t = np.zeros((4, 4, 4), dtype=np.float32)
        t[:2] = 1.0
        assert float(soft_dice(t, t)) < 1e-6

    def test_no_overlap_near_one(self):
        p = np.zeros((4, 4, 4), dtype=np.float32)
        t = np.ones((4, 4, 4), dtype=np.float32)
        assert float(soft_dice(p, t)) == pytest.approx(1.0, abs=1e-5)

    def test_uniform_half_on_half_target(self):
        p = np.full((4, 4, 4), 0.5, dtype=np.float32)
        t = np.zeros((4, 4, 4), dtype=np.float32)
        t[:2] = 1.0
        assert float(soft_dice(p, t)) == pytest.approx(0.5, abs=1e-5)

    def test_symmetric_for_binary_inputs(self):
        rng = np.random.default_rng(0)
        a = (rng.random((3, 3, 3)) < 0.4).astype(np.float32)
        b = (rng.random((3, 3, 3)) < 0.4).astype(np.float32)
        assert float(soft_dice(a, b)) == pytest.approx(float(soft_dice(b, a)), rel=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_summation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((3, 4, 2))
        t = (rng.random((3, 4, 2)) < 0.5).astype(np.float64)
        assert float(soft_dice(p, t)) == pytest.approx(summation_dice(p, t), rel=1e-6)


class TestEntropy:
    def test_half_is_log_two(self):
        p = np.full((5, 5, 5), 0.5)
        assert float(entropy(p)) == pytest.approx(math.log(2), abs=1e-9)

    def test_confident_is_near_zero(self):
        p = np.zeros((4, 4, 4), dtype=np.float32)
        p[2:] = 1.0
        assert float(entropy(p)) < 1e-5

    def test_single_voxel_analytic(self):
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert float(entropy(np.array([[[0.9]]]))) == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(0.32508, abs=1e-5)


class TestMaskedPrediction:
    def test_all_ones_mask_is_identity(self):
        p = np.random.default_rng(0).random((3, 3, 3))
        out = masked_prediction(p, np.ones((3, 3, 3)))
        np.testing.assert_allclose(out.numpy(), p)

    def test_all_zeros_mask_is_zero(self):
        p = np.random.default_rng(0).random((3, 3, 3))
        assert float(masked_prediction(p, np.zeros((3, 3, 3))).abs().sum()) == 0.0

    def test_mixed_mask(self):
        p = np.random.default_rng(1).random((3, 3, 3))
        m = np.zeros((3, 3, 3))
        m[0] = 1.0
        out = masked_prediction(p, m).numpy()
        np.testing.assert_allclose(out[0], p[0])
        assert np.all(out[1:] == 0.0)


class TestClickLoss:
    def test_mask_predicting_itself_is_near_zero(self):
        m = np.zeros((4, 4, 4), dtype=np.float32)
        m[1:3, 1:3, 1:3] = 1.0
        assert float(click_loss(m, m)) < 1e-4

    def test_zero_probs_match_summation_oracle(self):
        m = np.zeros((4, 4, 4), dtype=np.float32)
        m[:2, :2, :2] = 1.0
        p = np.zeros((4, 4, 4), dtype=np.float32)
        w = LossWeights()
        expected = summation_bce(p * m, m) + w.sigma * summation_dice(p * m, m)
        assert float(click_loss(p, m, w)) == pytest.approx(expected, rel=1e-6)

    def test_sigma_zero_is_bce_alone(self):
        rng = np.random.default_rng(2)
        p = rng.random((3, 3, 3)).astype(np.float32)
        m = (rng.random((3, 3, 3)) < 0.5).astype(np.float32)
        w = LossWeights(sigma=0.0)
        assert float(click_loss(p, m, w)) == pytest.approx(
            float(bce(torch.as_tensor(p * m), torch.as_tensor(m))), rel=1e-6)


class TestTtLoss:
    def test_weighted_sum_of_components(self):
        # component values (0.2, 0.4, 0.1) with sigma=0.5, gamma=1 -> 0.5
        assert 0.2 + 0.5 * 0.4 + 1.0 * 0.1 == pytest.approx(0.5)
        rng = np.random.default_rng(3)
        p = rng.random((4, 4, 4)).astype(np.float32)
        m = (rng.random((4, 4, 4)) < 0.5).astype(np.float32)
        parts = tt_loss_components(p, m, LossWeights())
        expected = float(parts["bce"]) + 0.5 * float(parts["dice"]) + float(parts["entropy"])
        assert float(parts["total"]) == pytest.approx(expected, rel=1e-6)
        assert float(tt_loss(p, m)) == pytest.approx(expected, rel=1e-6)

    def test_gamma_zero_equals_click_loss(self):
        rng = np.random.default_rng(4)
        p = rng.random((3, 3, 3)).astype(np.float32)
        m = (rng.random((3, 3, 3)) < 0.5).astype(np.float32)
        w = LossWeights(gamma=0.0)
        assert float(tt_loss(p, m, w)) == pytest.approx(float(click_loss(p, m, w)), rel=1e-6)

    def test_confident_match_inside_mask_is_near_zero(self):
        m = np.zeros((4, 4, 4), dtype=np.float32)
        m[1:3, 1:3, 1:3] = 1.0
        assert float(tt_loss(m, m)) < 1e-4

    def test_linear_in_sigma_and_gamma(self):
        rng = np.random.default_rng(5)
        p = rng.random((3, 3, 3)).astype(np.float32)
        m = (rng.random((3, 3, 3)) < 0.5).astype(np.float32)
        base = tt_loss_components(p, m, LossWeights())
        for sigma in (0.0, 0.5, 1.0):
            for gamma in (0.0, 0.5, 1.0):
                w = LossWeights(sigma=sigma, gamma=gamma)
                expected = (float(base["bce"]) + sigma * float(base["dice"])
                            + gamma * float(base["entropy"]))
                assert float(tt_loss(p, m, w)) == pytest.approx(expected, rel=1e-6)

    def test_gradient_vanishes_outside_mask_without_entropy(self):
        rng = np.random.default_rng(6)
        p = torch.tensor(rng.uniform(0.1, 0.9, size=(4, 4, 4)), requires_grad=True)
        m = torch.zeros((4, 4, 4), dtype=p.dtype)
        m[1:3, 1:3, 1:3] = 1.0
        loss = click_loss(p, m, LossWeights())
        loss.backward()
        outside = p.grad[m == 0]
        assert torch.all(outside == 0.0)

    def test_entropy_term_is_only_gradient_outside_mask(self):
        rng = np.random.default_rng(7)
        p = torch.tensor(rng.uniform(0.1, 0.9, size=(4, 4, 4)), requires_grad=True)
        m = torch.zeros((4, 4, 4), dtype=p.dtype)
        m[0, 0, 0] = 1.0
        tt_loss(p, m, LossWeights()).backward()
        assert torch.any(p.grad[m == 0] != 0.0)


class TestTrainLoss:
    def test_perfect_binary_prediction_near_zero(self):
        t = np.zeros((4, 4, 4), dtype=np.float32)
        t[:1] = 1.0
        assert float(train_loss(t, t)) < 1e-4

    def test_half_probs_half_target_closed_form(self):
        p = np.full((4, 4, 4), 0.5, dtype=np.float32)
        t = np.zeros((4, 4, 4), dtype=np.float32)
        t[:2] = 1.0
        assert float(train_loss(p, t)) == pytest.approx(math.log(2) + 0.5, abs=1e-5)

    def test_both_empty_near_zero(self):
        z = np.zeros((3, 3, 3), dtype=np.float32)
        assert float(train_loss(z, z)) < 1e-4


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.sigma, w.gamma) == (0.5, 1.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(sigma=-0.1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_all_losses_finite_and_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((3, 3, 3))
        m = (rng.random((3, 3, 3)) < 0.5).astype(np.float64)
        for value in (float(bce(p, m)), float(soft_dice(p, m)), float(entropy(p)),
                      float(click_loss(p, m)), float(tt_loss(p, m)),
                      float(train_loss(p, m))):
            assert math.isfinite(value)
            assert value >= -1e-9
