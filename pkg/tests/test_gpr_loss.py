import dataclasses
import math

import numpy as np
import pytest

from spml_lab.core import ConfigError, DomainError, GprConfig, PredictionBatch
from spml_lab.gpr_loss import (
    AlphaState,
    alpha_schedule,
    bce_loss_batch,
    clamped_inverse_weight,
    false_negative_estimate,
    gaussian_weight,
    gpr_loss_batch,
    gr_loss_batch,
    loss_confirmed_positive,
    loss_negative_pseudo,
    loss_positive_pseudo,
    loss_undefined,
    method_confidence,
    positive_count_regularizer,
)

CFG = GprConfig(m=3.0)
ALPHA = AlphaState(mu=0.2, sigma=0.15)


def random_case(rng, n=None, c=None, logit_scale=2.0):
    n = n or int(rng.integers(1, 9))
    c = c or int(rng.integers(2, 13))
    logits = rng.normal(0.0, logit_scale, (n, c))
    ann = np.zeros((n, c), dtype=np.uint8)
    ann[np.arange(n), rng.integers(0, c, n)] = 1
    lab = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=(n, c))
    return PredictionBatch.from_logits(logits), ann, lab


# ---------------------------------------------------------------------------
# Independent oracle: frozen-weight loss evaluated without the package kernels
# ---------------------------------------------------------------------------


def frozen_weight_loss(logits, ann, lab, cfg, alpha, v0, k0):
    """Plain re-evaluation of the batch loss with weights/k-hat pinned to v0/k0."""
    p = np.clip(1.0 / (1.0 + np.exp(-logits)), 1e-7, 1 - 1e-7)
    n, c = p.shape
    total = 0.0
    for i in range(n):
        for j in range(c):
            pij, k = p[i, j], k0[i, j]
            if ann[i, j] == 1:
                term = -math.log(pij)
            elif lab[i, j] == 0:
                term = (1 - k) * (1 - (1 - pij) ** cfg.q1) / cfg.q1 + k * (1 - pij**cfg.q2) / cfg.q2
            elif lab[i, j] == -1:
                term = -math.log(1 - pij)
            else:
                term = -(1 - cfg.q3) * math.log(1 - pij) - cfg.q3 * math.log(pij)
            total += v0[i, j] * term
    total /= n * c
    m_hat = p.sum() / n
    return total + cfg.eta * ((m_hat - cfg.m) / c) ** 2


def base_weights(probs, ann, lab, cfg, alpha):
    bell = np.exp(-((probs - alpha.mu) ** 2) / (2 * alpha.sigma**2))
    v = np.where(ann == 1, 1.0, bell)
    v = np.where((ann == 0) & (lab == 1), np.clip(1 - bell, cfg.lambda1, cfg.lambda2), v)
    return v


def central_differences(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# Schedules and weights
# ---------------------------------------------------------------------------


class TestAlphaSchedule:
    def test_endpoints(self):
        assert alpha_schedule(0, 5, CFG) == AlphaState(CFG.mu_start, CFG.sigma_start)
        assert alpha_schedule(4, 5, CFG) == AlphaState(CFG.mu_end, CFG.sigma_end)

    def test_midpoint(self):
        cfg = dataclasses.replace(CFG, mu_start=0.1, mu_end=0.3)
        assert alpha_schedule(2, 5, cfg).mu == pytest.approx(0.2, abs=1e-15)

    def test_single_epoch_run(self):
        assert alpha_schedule(0, 1, CFG) == AlphaState(CFG.mu_start, CFG.sigma_start)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            alpha_schedule(5, 5, CFG)
        with pytest.raises(DomainError):
            alpha_schedule(-1, 5, CFG)


class TestWeights:
    def test_gaussian_peak(self):
        assert gaussian_weight(ALPHA.mu, ALPHA) == pytest.approx(1.0, abs=1e-15)

    def test_gaussian_analytic(self):
        assert gaussian_weight(ALPHA.mu + ALPHA.sigma, ALPHA) == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert gaussian_weight(ALPHA.mu + 3 * ALPHA.sigma, ALPHA) == pytest.approx(math.exp(-4.5), rel=1e-12)

    def test_inverse_weight_clamps(self):
        cfg = dataclasses.replace(CFG, lambda1=0.1, lambda2=0.9)
        assert clamped_inverse_weight(ALPHA.mu, ALPHA, cfg) == pytest.approx(0.1)
        wide = dataclasses.replace(CFG, lambda1=0.0, lambda2=1.0)
        assert clamped_inverse_weight(ALPHA.mu + ALPHA.sigma, ALPHA, wide) == pytest.approx(
            1 - math.exp(-0.5), rel=1e-12
        )
        narrow = AlphaState(mu=0.2, sigma=0.01)
        assert clamped_inverse_weight(0.99, narrow, cfg) == pytest.approx(0.9)

    def test_inverse_weight_always_within_bounds(self):
        rng = np.random.default_rng(1)
        p = rng.random(1000)
        w = clamped_inverse_weight(p, ALPHA, CFG)
        assert np.all(w >= CFG.lambda1) and np.all(w <= CFG.lambda2)

    def test_false_negative_estimate(self):
        assert false_negative_estimate(0.0, 2.0) == 0.0
        assert false_negative_estimate(1.0, 5.0) == 1.0
        assert false_negative_estimate(0.5, 1.0) == 0.5
        with pytest.raises(DomainError):
            false_negative_estimate(0.5, 0.0)


# ---------------------------------------------------------------------------
# Scalar loss branches
# ---------------------------------------------------------------------------


class TestLossBranches:
    def test_confirmed_positive(self):
        assert loss_confirmed_positive(1 - 1e-7) == pytest.approx(1e-7, rel=1e-3)
        assert loss_confirmed_positive(0.5) == pytest.approx(math.log(2), rel=1e-12)
        assert loss_confirmed_positive(math.exp(-2)) == pytest.approx(2.0, rel=1e-12)

    def test_undefined_zero_probability_limit(self):
        cfg = dataclasses.replace(CFG, q1=0.7)
        assert loss_undefined(1e-12, 0.0, cfg) == pytest.approx(0.0, abs=1e-11)

    def test_undefined_q1_one_is_mae_like(self):
        cfg = dataclasses.replace(CFG, q1=1.0)
        assert loss_undefined(0.3, 0.0, cfg) == pytest.approx(0.3, rel=1e-12)

    def test_undefined_q2_limit_matches_log(self):
        # (1 - p^q)/q -> -log p as q -> 0; oracle is math.log.
        cfg = dataclasses.replace(CFG, q2=1e-4)
        assert abs(float(loss_undefined(0.3, 1.0, cfg)) - (-math.log(0.3))) < 1e-3

    def test_gce_limits_over_grid(self):
        # Both q-branches approach the BCE forms at q = 1e-4. The exact limit
        # error is q*log(x)^2/2, so the worst grid point (x = 0.01) sits at
        # 1.0604e-3; interior points are below 1e-3.
        cfg = dataclasses.replace(CFG, q1=1e-4, q2=1e-4)
        ps = np.arange(0.01, 0.9901, 0.01)
        undef_as_neg = loss_undefined(ps, np.zeros_like(ps), cfg)
        undef_as_pos = loss_undefined(ps, np.ones_like(ps), cfg)
        dev_neg = np.abs(undef_as_neg - (-np.log(1 - ps)))
        dev_pos = np.abs(undef_as_pos - (-np.log(ps)))
        bound = 1e-4 * math.log(0.01) ** 2 / 2 * 1.01
        assert np.max(dev_neg) < bound
        assert np.max(dev_pos) < bound
        interior = (ps >= 0.02) & (ps <= 0.98)
        assert np.max(dev_neg[interior]) < 1e-3
        assert np.max(dev_pos[interior]) < 1e-3

    def test_negative_pseudo(self):
        assert loss_negative_pseudo(1e-7) == pytest.approx(1e-7, rel=1e-3)
        assert loss_negative_pseudo(0.5) == pytest.approx(math.log(2), rel=1e-12)
        assert loss_negative_pseudo(1 - math.exp(-3)) == pytest.approx(3.0, rel=1e-9)

    def test_positive_pseudo_degenerate_q3(self):
        assert loss_positive_pseudo(0.5, 1.0) == pytest.approx(float(loss_confirmed_positive(0.5)), rel=1e-12)
        assert loss_positive_pseudo(0.5, 0.0) == pytest.approx(float(loss_negative_pseudo(0.5)), rel=1e-12)

    def test_positive_pseudo_arithmetic(self):
        # Oracle: 0.5 * (-log 0.1) + 0.5 * (-log 0.9) = 1.2039728043259358
        assert loss_positive_pseudo(0.9, 0.5) == pytest.approx(1.2039728043259358, rel=1e-12)

    def test_all_branches_nonnegative(self):
        rng = np.random.default_rng(2)
        p = np.clip(rng.random(500), 1e-7, 1 - 1e-7)
        cfg = dataclasses.replace(CFG, q1=rng.uniform(0.05, 1.0), q2=rng.uniform(0.05, 1.0))
        assert np.all(loss_confirmed_positive(p) >= 0)
        assert np.all(loss_undefined(p, p**2, cfg) >= 0)
        assert np.all(loss_negative_pseudo(p) >= 0)
        assert np.all(loss_positive_pseudo(p, 0.7) >= 0)

    def test_monotonicity(self):
        p = np.linspace(0.01, 0.99, 99)
        assert np.all(np.diff(loss_confirmed_positive(p)) < 0)
        assert np.all(np.diff(loss_negative_pseudo(p)) > 0)
        half = np.linspace(0.01, 0.5, 50)
        assert np.all(np.diff(loss_positive_pseudo(half, 0.8)) < 0)


# ---------------------------------------------------------------------------
# Regularizer and confidence
# ---------------------------------------------------------------------------


class TestRegularizer:
    def test_zero_at_target(self):
        probs = np.full((4, 5), 0.5)  # m_hat = 2.5, exactly representable
        value, grad = positive_count_regularizer(probs, 2.5)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_forced_arithmetic(self):
        probs = np.full((1, 10), 0.5)
        value, grad = positive_count_regularizer(probs, 3.0)
        assert value == pytest.approx(0.04, rel=1e-12)
        assert np.allclose(grad, 2 * (5.0 - 3.0) / (1 * 100))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(0.05, 0.95, (5, 7))

        def value_of(x):
            n, c = x.shape
            return ((x.sum() / n - 3.0) / c) ** 2

        _, grad = positive_count_regularizer(probs, 3.0)
        fd = central_differences(value_of, probs)
        assert np.allclose(grad, fd, rtol=1e-6, atol=1e-10)

    def test_gradient_uniform(self):
        rng = np.random.default_rng(4)
        _, grad = positive_count_regularizer(rng.random((3, 4)), 1.0)
        assert len(np.unique(grad)) == 1


class TestMethodConfidence:
    def test_all_ones(self):
        assert method_confidence([1.0, 1.0, 1.0]) == 1.0

    def test_analytic_product(self):
        assert method_confidence([math.exp(-1), math.exp(-1)]) == pytest.approx(math.exp(-2), rel=1e-12)

    def test_small_entry_drives_to_zero(self):
        assert method_confidence([1e-200, 1e-200]) == 0.0

    def test_empty_is_unit_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            assert method_confidence([]) == 1.0
        assert any("empty" in r.message for r in caplog.records)

    def test_rejects_out_of_domain(self):
        with pytest.raises(DomainError):
            method_confidence([0.0])
        with pytest.raises(DomainError):
            method_confidence([1.5])


# ---------------------------------------------------------------------------
# Batch losses
# ---------------------------------------------------------------------------


class TestGprLossBatch:
    def test_hand_case_two_classes(self):
        preds = PredictionBatch.from_logits(np.array([[0.0, 0.0]]))
        ann = np.array([[1, 0]], dtype=np.uint8)
        lab = np.array([[0, -1]], dtype=np.int8)
        cfg = dataclasses.replace(CFG, eta=0.0)
        alpha = AlphaState(0.1, 0.2)
        breakdown, _ = gpr_loss_batch(preds, ann, lab, cfg, alpha)
        bell = math.exp(-((0.5 - 0.1) ** 2) / (2 * 0.2**2))
        expected = 0.5 * (math.log(2) + bell * math.log(2))
        assert breakdown.total == pytest.approx(expected, rel=1e-12)
        assert breakdown.per_case_sums[1] == 0.0
        assert breakdown.per_case_sums[3] == 0.0

    def test_breakdown_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            preds, ann, lab = random_case(rng)
            breakdown, _ = gpr_loss_batch(preds, ann, lab, CFG, ALPHA)
            recomposed = sum(breakdown.per_case_sums) + CFG.eta * breakdown.regularizer_value
            assert breakdown.total == pytest.approx(recomposed, rel=1e-12)

    def test_reduction_to_gr(self):
        rng = np.random.default_rng(6)
        cfg = dataclasses.replace(CFG, eta=0.0)
        for _ in range(30):
            preds, ann, _ = random_case(rng)
            zeros = np.zeros_like(ann, dtype=np.int8)
            breakdown, grad_new = gpr_loss_batch(preds, ann, zeros, cfg, ALPHA)
            total_old, grad_old = gr_loss_batch(preds, ann, cfg, ALPHA)
            assert breakdown.total == pytest.approx(total_old, rel=1e-12)
            assert np.allclose(grad_new, grad_old, rtol=1e-12, atol=0)

    def test_confirmed_positive_ignores_pseudo_label(self):
        preds = PredictionBatch.from_logits(np.array([[0.3, -0.4]]))
        ann = np.array([[1, 0]], dtype=np.uint8)
        for value in (-1, 0, 1):
            lab = np.array([[value, 0]], dtype=np.int8)
            breakdown, grad = gpr_loss_batch(preds, ann, lab, CFG, ALPHA)
            if value == -1:
                first, first_grad = breakdown, grad
        assert breakdown.total == pytest.approx(first.total, rel=1e-15)
        assert np.array_equal(grad, first_grad)

    def test_gradient_matches_frozen_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            preds, ann, lab = random_case(rng, logit_scale=1.5)
            _, grad = gpr_loss_batch(preds, ann, lab, CFG, ALPHA)
            v0 = base_weights(preds.probabilities, ann, lab, CFG, ALPHA)
            k0 = preds.probabilities**CFG.beta
            fd = central_differences(
                lambda x: frozen_weight_loss(x, ann, lab, CFG, ALPHA, v0, k0), preds.logits
            )
            assert np.allclose(grad, fd, rtol=1e-5, atol=1e-8)

    def test_custom_k_hat_hook(self):
        rng = np.random.default_rng(8)
        preds, ann, lab = random_case(rng)
        flat = lambda p, beta: np.full_like(p, 0.5)
        b_default, _ = gpr_loss_batch(preds, ann, lab, CFG, ALPHA)
        b_flat, _ = gpr_loss_batch(preds, ann, lab, CFG, ALPHA, k_hat_fn=flat)
        assert b_default.total != b_flat.total

    def test_shape_mismatch(self):
        preds = PredictionBatch.from_logits(np.zeros((2, 3)))
        ann = np.array([[1, 0, 0]], dtype=np.uint8)
        with pytest.raises(DomainError):
            gpr_loss_batch(preds, ann, np.zeros((1, 3), dtype=np.int8), CFG, ALPHA)

    def test_eta_without_m_is_config_error(self):
        preds = PredictionBatch.from_logits(np.zeros((1, 2)))
        ann = np.array([[1, 0]], dtype=np.uint8)
        cfg = GprConfig(m=None, eta=0.5)
        with pytest.raises(ConfigError):
            gpr_loss_batch(preds, ann, np.zeros((1, 2), dtype=np.int8), cfg, ALPHA)


class TestGrLossBatch:
    def test_single_positive_element(self):
        preds = PredictionBatch.from_logits(np.array([[0.0]]))
        ann = np.array([[1]], dtype=np.uint8)
        total, _ = gr_loss_batch(preds, ann, CFG, ALPHA)
        assert total == pytest.approx(math.log(2), rel=1e-12)

    def test_gradient_matches_frozen_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            preds, ann, _ = random_case(rng, logit_scale=1.5)
            zeros = np.zeros_like(ann, dtype=np.int8)
            _, grad = gr_loss_batch(preds, ann, CFG, ALPHA)
            v0 = base_weights(preds.probabilities, ann, zeros, CFG, ALPHA)
            k0 = preds.probabilities**CFG.beta
            cfg_no_reg = dataclasses.replace(CFG, eta=0.0)
            fd = central_differences(
                lambda x: frozen_weight_loss(x, ann, zeros, cfg_no_reg, ALPHA, v0, k0), preds.logits
            )
            assert np.allclose(grad, fd, rtol=1e-5, atol=1e-8)


class TestBceLossBatch:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(10)
        preds = PredictionBatch.from_logits(rng.normal(0, 1, (4, 6)))
        targets = rng.integers(0, 2, (4, 6)).astype(float)
        total, grad = bce_loss_batch(preds, targets)
        p = preds.probabilities
        expected = -np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert total == pytest.approx(float(expected), rel=1e-12)
        fd = central_differences(
            lambda x: -np.mean(
                targets * np.log(np.clip(1 / (1 + np.exp(-x)), 1e-7, 1 - 1e-7))
                + (1 - targets) * np.log(1 - np.clip(1 / (1 + np.exp(-x)), 1e-7, 1 - 1e-7))
            ),
            preds.logits,
        )
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-8)
