import itertools

import numpy as np
import pytest

from stockloss.core import LossConfig, LossVariant, OutputVector, SignalSource
from stockloss.gradcheck import discontinuity_witness, gradient_suite, linearity_sweep, relative_error
from stockloss.losses import (
    LOSS_FUNCTIONS,
    LossInputError,
    batch_loss,
    evaluate_loss,
    loss_gradient_fd,
    signal_column,
    signal_delta,
    stock_loss,
    stock_loss_l2,
    stock_loss_max,
    stock_loss_norm,
)

# high-precision references (mpmath, 30 digits)
MINUS_002_TANH_8 = -0.01999999549859351821
ONE_MINUS_SQRT_0625 = 0.2094305849579051670

L1 = LossVariant.STOCK_LOSS
L2MAX = LossVariant.STOCK_LOSS_MAX
L3 = LossVariant.STOCK_LOSS_L2
L4 = LossVariant.STOCK_LOSS_NORM


def ov(*values, hold=None):
    return OutputVector(np.array(values, dtype=float), hold)


def cfg(variant, smooth=False, **kw):
    return LossConfig(variant, smooth=smooth, **kw)


class TestStockLoss:
    def test_single_stock(self):
        assert stock_loss(ov(0.8), [0.02], cfg(L1)).value == pytest.approx(-0.02, rel=1e-15)

    def test_long_short_pair(self):
        assert stock_loss(ov(0.5, -0.5), [0.02, -0.02], cfg(L1)).value == pytest.approx(-0.02, rel=1e-15)

    def test_smooth_single_stock(self):
        value = stock_loss(ov(0.8), [0.02], cfg(L1, smooth=True)).value
        assert value == pytest.approx(MINUS_002_TANH_8, rel=1e-14)

    def test_hold_term_enters_negated_sum(self):
        value = stock_loss(ov(0.6, 0.3, hold=0.1), [0.02, 0.01], cfg(L1, use_hold=True)).value
        assert value == pytest.approx(-(0.6 * 0.02 + 0.3 * 0.01 + 0.1), rel=1e-14)

    def test_single_flip_negates_that_contribution(self):
        rng = np.random.default_rng(0)
        o = rng.uniform(0.1, 0.9, 5) * rng.choice([-1, 1], 5)
        d = rng.normal(0, 0.02, 5)
        base = stock_loss(OutputVector(o), d, cfg(L1)).value
        for i in range(5):
            flipped = o.copy()
            flipped[i] = -flipped[i]
            v = abs(o[i]) / np.abs(o).sum()
            contribution = -v * d[i] * np.sign(o[i])
            new = stock_loss(OutputVector(flipped), d, cfg(L1)).value
            assert new - base == pytest.approx(-2.0 * contribution, rel=1e-9, abs=1e-15)

    def test_smoothing_error_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(1, 8))
            o = rng.uniform(0.85, 0.999, n) * rng.choice([-1, 1], n)
            d = rng.normal(0, 0.02, n)
            gap = abs(
                stock_loss(OutputVector(o), d, cfg(L1, smooth=True)).value
                - stock_loss(OutputVector(o), d, cfg(L1)).value
            )
            assert gap < 1e-6 * np.abs(d).sum()


class TestStockLossMax:
    def test_near_equal_outputs(self):
        value = stock_loss_max(ov(1 - 1e-9, 1 - 1e-9), [0.02, 0.01], cfg(L2MAX)).value
        assert value == pytest.approx(0.25, rel=1e-12)

    def test_perfect_single_stock(self):
        assert stock_loss_max(ov(0.5), [0.03], cfg(L2MAX)).value == 0.0

    def test_zero_deltas_clamp(self):
        assert stock_loss_max(ov(0.5, 0.5), [0.0, 0.0], cfg(L2MAX)).value == 1.0

    def test_all_negative_deltas_keep_denominator_sign(self):
        # D = max(d) = -0.01 is used as printed, so correct shorts score as losses
        value = stock_loss_max(ov(-0.5, -0.5), [-0.01, -0.02], cfg(L2MAX)).value
        assert value == pytest.approx(1.0 + 0.5 * 1.0 + 0.5 * 2.0, rel=1e-14)

    def test_tiny_negative_max_clamps_with_sign(self):
        value = stock_loss_max(ov(0.5), [-1e-12], cfg(L2MAX)).value
        assert value == pytest.approx(1.0 - (-1e-12 / -1e-8), rel=1e-12)


class TestStockLossL2:
    def test_single_stock(self):
        assert stock_loss_l2(ov(0.9), [0.02], cfg(L3)).value == 0.0

    def test_two_stocks(self):
        value = stock_loss_l2(ov(0.5, 0.5), [0.02, 0.01], cfg(L3)).value
        assert value == pytest.approx(ONE_MINUS_SQRT_0625, rel=1e-14)

    def test_zero_deltas_floor(self):
        assert stock_loss_l2(ov(0.5, 0.5), [0.0, 0.0], cfg(L3)).value == pytest.approx(1.0 - 1e-8, rel=1e-15)

    def test_gate_is_identity_when_every_bet_is_right(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = rng.normal(0, 0.02, 4)
            o = np.sign(d) * rng.uniform(0.05, 0.95, 4)
            gated = stock_loss_l2(OutputVector(o), d, cfg(L3)).value
            bare = stock_loss_l2(OutputVector(o), d, cfg(L3, l2_direction_gate=False)).value
            assert gated == pytest.approx(bare, rel=1e-13, abs=1e-15)

    def test_bare_form_is_blind_to_direction(self):
        o, d = np.array([0.4, -0.7, 0.2]), np.array([0.01, 0.02, -0.03])
        c = cfg(L3, l2_direction_gate=False)
        assert stock_loss_l2(OutputVector(-o), d, c).value == stock_loss_l2(OutputVector(o), d, c).value

    def test_wrong_bet_earns_nothing(self):
        # stock 2 points the wrong way, so only stock 1's share counts
        value = stock_loss_l2(ov(0.5, -0.5), [0.02, 0.01], cfg(L3)).value
        assert value == pytest.approx(1.0 - np.sqrt(0.5), rel=1e-14)

    def test_confident_wrong_bet_gradient_is_finite_and_accurate(self):
        c = cfg(L3, smooth=True)
        o = ov(0.92)
        g = stock_loss_l2(o, [-0.012], c).gradient
        fd = loss_gradient_fd(stock_loss_l2, o, [-0.012], c)
        assert relative_error(g, fd) < 1e-6


class TestStockLossNorm:
    def test_single_stock(self):
        assert stock_loss_norm(ov(0.7), [0.05], cfg(L4)).value == 0.0

    def test_aligned_pair(self):
        assert stock_loss_norm(ov(0.5, 0.5), [0.04, 0.02], cfg(L4)).value == pytest.approx(0.0, abs=1e-15)

    def test_mixed_pair(self):
        value = stock_loss_norm(ov(0.5, -0.5), [0.04, 0.02], cfg(L4)).value
        assert value == pytest.approx(2.0 / 3.0, rel=1e-14)

    def test_vanishing_denominator_uses_positive_epsilon(self):
        ev = stock_loss_norm(ov(0.5, -0.5), [0.01, -0.01], cfg(L4))
        assert ev.value == pytest.approx(1.0 - 0.01 / 1e-8, rel=1e-12)
        assert np.all(np.isfinite(ev.gradient))


class TestMonotoneReward:
    @pytest.mark.parametrize("variant", list(LossVariant))
    @pytest.mark.parametrize("delta", [(0.02, 0.01), (0.01, 0.03)])
    def test_growing_correct_bet_lowers_loss(self, variant, delta):
        grid = np.linspace(0.1, 0.9, 9)
        values = [evaluate_loss(ov(a, -0.5), list(delta), cfg(variant)).value for a in grid]
        assert np.all(np.diff(values) < 0)


class TestFiniteDifferences:
    def test_smooth_gradient_at_zero_is_finite(self):
        c = cfg(L1, smooth=True)
        g = stock_loss(ov(0.0, 0.5), [0.01, 0.02], c).gradient
        assert np.all(np.isfinite(g))
        np.testing.assert_allclose(g, loss_gradient_fd(stock_loss, ov(0.0, 0.5), [0.01, 0.02], c), rtol=1e-6, atol=1e-10)

    def test_straddling_kink_rejected(self):
        with pytest.raises(ValueError, match="kink"):
            loss_gradient_fd(stock_loss, ov(0.0), [0.01], cfg(L1))

    def test_leaving_unit_interval_rejected(self):
        with pytest.raises(ValueError, match="leave"):
            loss_gradient_fd(stock_loss, ov(1 - 1e-7), [0.01], cfg(L1, smooth=True), h=1e-6)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            loss_gradient_fd(stock_loss, ov(0.5), [0.01], cfg(L1), h=0.0)

    def test_reduced_suite_all_combinations(self):
        rows = gradient_suite(n_points=10, seed=7)
        assert len(rows) == 32
        bad = [r.label() for r in rows if not r.passed]
        assert not bad


class TestDiscontinuity:
    def test_jump_matches_general_formula_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            others = rng.uniform(0.05, 0.9, 4) * rng.choice([-1, 1], 4)
            delta = rng.normal(0, 0.02, 5)
            w = discontinuity_witness(others, delta)
            assert w.relative_gap < 1e-6

    def test_equal_delta_instance_matches_closed_form_and_lower_bound(self):
        others = np.array([0.3, 0.5, 0.7])
        delta = np.full(4, 0.02)
        w = discontinuity_witness(others, delta)
        assert w.measured == pytest.approx(w.equal_delta_form, rel=1e-6)
        S = 1e-4 + others.sum()
        assert abs(w.measured) >= abs(delta[0]) / S * 0.5


class TestLinearity:
    def test_sweep_is_linear_with_negative_slope(self):
        fit = linearity_sweep(n_stocks=50, seed=0)
        assert fit.r_squared > 0.98
        assert fit.slope < 0


class TestBatchAndErrors:
    @pytest.mark.parametrize("variant,smooth,use_hold", list(itertools.product(LossVariant, [False, True], [False, True])))
    def test_batch_is_mean_of_steps(self, variant, smooth, use_hold):
        rng = np.random.default_rng(12)
        c = cfg(variant, smooth=smooth, use_hold=use_hold)
        O = rng.uniform(-0.9, 0.9, (6, 3 + use_hold))
        D = rng.normal(0, 0.02, (6, 3))
        value, grads = batch_loss(O, D, c)
        singles = [evaluate_loss(OutputVector.from_array(o, use_hold), d, c) for o, d in zip(O, D)]
        assert value == pytest.approx(np.mean([s.value for s in singles]), rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(grads, np.array([s.gradient for s in singles]) / 6, rtol=1e-12, atol=1e-16)

    def test_hold_mismatch(self):
        with pytest.raises(LossInputError):
            stock_loss(ov(0.5, hold=0.2), [0.01], cfg(L1))
        with pytest.raises(LossInputError):
            stock_loss(ov(0.5), [0.01], cfg(L1, use_hold=True))

    def test_length_mismatch(self):
        with pytest.raises(LossInputError):
            stock_loss(ov(0.5, 0.2), [0.01], cfg(L1))

    def test_variant_mismatch(self):
        with pytest.raises(LossInputError):
            stock_loss(ov(0.5), [0.01], cfg(L3))

    def test_non_finite_delta(self):
        with pytest.raises(ValueError):
            stock_loss(ov(0.5), [np.nan], cfg(L1))

    def test_dispatch_table(self):
        assert set(LOSS_FUNCTIONS) == set(LossVariant)

    def test_signal_delta_and_column(self):
        x = np.array([[1.0, 2.0], [1.5, 1.0]])
        np.testing.assert_array_equal(signal_delta(x, 0), [0.5, -1.0])
        assert signal_column(LossConfig(signal_source=SignalSource.PRICE)) == "price"
        assert signal_column(LossConfig()) == "return"
