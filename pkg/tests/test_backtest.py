import itertools

import numpy as np
import pytest
from scipy import stats

from stockloss.backtest import (
    BacktestConfig,
    BacktestError,
    buy_and_hold,
    ledger_from_exposure,
    mann_whitney_u,
    run_backtest,
)
from stockloss.core import AllocationDecision, Direction, LossConfig, LossVariant, OutputVector, allocate
from stockloss.losses import stock_loss

B, S, F = Direction.BUY, Direction.SHORT, Direction.FLAT


def decision(fractions, directions, hold=0.0):
    return AllocationDecision(np.array(fractions, dtype=float), tuple(directions), hold)


def step_through(prices, decisions, budget, compounding):
    """Independent scalar re-computation of the capital path."""
    capital = [budget]
    for t, d in enumerate(decisions):
        pnl = 0.0
        for i, (f, direction) in enumerate(zip(d.fractions, d.directions)):
            pnl += f * int(direction) * (prices[t + 1][i] - prices[t][i]) / prices[t][i]
        base = capital[-1] if compounding else budget
        capital.append(capital[-1] + base * pnl)
    return capital


class TestRunBacktest:
    def test_single_buy(self, make_prices_panel):
        ledger = run_backtest(make_prices_panel([[100.0], [110.0]]), [decision([1.0], [B])], BacktestConfig(1000.0))
        assert ledger.final_capital == pytest.approx(1100.0, rel=1e-15)
        assert ledger.profit_pct == pytest.approx(10.0, rel=1e-13)

    def test_single_short(self, make_prices_panel):
        ledger = run_backtest(make_prices_panel([[100.0], [110.0]]), [decision([1.0], [S])], BacktestConfig(1000.0))
        assert ledger.final_capital == pytest.approx(900.0, rel=1e-15)
        assert ledger.profit_pct == pytest.approx(-10.0, rel=1e-13)

    def test_two_stock_three_day_ledger(self, make_prices_panel):
        prices = [[100.0, 50.0], [105.0, 49.0], [110.25, 49.0]]
        decisions = [decision([0.6, 0.4], [B, S]), decision([0.5, 0.0], [B, F], hold=0.5)]
        ledger = run_backtest(make_prices_panel(prices), decisions, BacktestConfig(1000.0))
        hand = step_through(prices, decisions, 1000.0, True)
        assert hand[1] == pytest.approx(1038.0, rel=1e-15)
        assert hand[2] == pytest.approx(1063.95, rel=1e-15)
        np.testing.assert_allclose(ledger.daily_capital, hand, rtol=1e-12)
        assert ledger.final_capital == pytest.approx(1063.95, rel=1e-9)
        assert ledger.profit_pct == pytest.approx(6.395, rel=1e-9)

    def test_non_compounding_uses_initial_stake(self, make_prices_panel):
        prices = [[100.0], [110.0], [121.0]]
        decisions = [decision([1.0], [B])] * 2
        ledger = run_backtest(make_prices_panel(prices), decisions, BacktestConfig(1000.0, compounding=False))
        assert ledger.final_capital == pytest.approx(1200.0, rel=1e-14)
        compounded = run_backtest(make_prices_panel(prices), decisions, BacktestConfig(1000.0))
        assert compounded.final_capital == pytest.approx(1210.0, rel=1e-14)

    def test_transaction_cost(self, make_prices_panel):
        ledger = run_backtest(
            make_prices_panel([[100.0], [100.0]]), [decision([0.5], [B], 0.5)], BacktestConfig(1000.0, transaction_cost_bps=10.0)
        )
        assert ledger.cost[0] == pytest.approx(1000.0 * 10 / 1e4 * 0.5, rel=1e-15)
        assert ledger.final_capital == pytest.approx(999.5, rel=1e-15)

    def test_length_mismatch(self, make_prices_panel):
        with pytest.raises(BacktestError):
            run_backtest(make_prices_panel([[1.0], [2.0], [3.0]]), [decision([1.0], [B])])

    def test_stock_count_mismatch(self, make_prices_panel):
        with pytest.raises(BacktestError):
            run_backtest(make_prices_panel([[1.0], [2.0]]), [decision([0.5, 0.5], [B, B])])

    def test_non_positive_price(self, make_prices_panel):
        with pytest.raises(BacktestError):
            ledger_from_exposure(make_prices_panel([[1.0], [-2.0]]), np.ones((1, 1)), np.ones(1), BacktestConfig())

    def test_ledger_invariants_and_export(self, make_prices_panel, tmp_path):
        rng = np.random.default_rng(0)
        prices = 100 * np.cumprod(1 + rng.normal(0, 0.01, (30, 3)), axis=0)
        exposure = rng.uniform(-0.3, 0.3, (29, 3))
        ledger = ledger_from_exposure(make_prices_panel(prices), exposure, np.abs(exposure).sum(1), BacktestConfig(500.0))
        assert ledger.daily_capital[0] == 500.0
        expected = (ledger.daily_capital[-1] - 500.0) / 500.0 * 100
        assert ledger.profit_pct == pytest.approx(expected, abs=1e-10)
        ledger.to_csv(tmp_path / "ledger.csv")
        lines = (tmp_path / "ledger.csv").read_text().splitlines()
        assert lines[0] == "day,date,capital,gross_pnl,cost"
        assert len(lines) == 31
        summary = ledger.summary()
        assert set(summary) >= {"profit_pct", "max_drawdown_pct", "daily_pnl_mean", "daily_pnl_std"}


class TestBacktestProperties:
    def test_constant_prices_earn_nothing(self, make_prices_panel):
        rng = np.random.default_rng(1)
        panel = make_prices_panel(np.full((20, 4), 42.0))
        decisions = [allocate(OutputVector(rng.uniform(-1, 1, 4))) for _ in range(19)]
        ledger = run_backtest(panel, decisions)
        assert ledger.profit_pct == 0.0

    def test_hold_everything_keeps_capital(self, make_prices_panel):
        rng = np.random.default_rng(2)
        panel = make_prices_panel(100 * np.cumprod(1 + rng.normal(0, 0.02, (15, 3)), axis=0))
        ledger = run_backtest(panel, [AllocationDecision.hold_all(3)] * 14)
        assert ledger.profit_pct == 0.0
        np.testing.assert_array_equal(ledger.daily_capital, 10_000.0)

    def test_direction_flip_negates_simple_profit(self, make_prices_panel):
        rng = np.random.default_rng(3)
        panel = make_prices_panel(100 * np.cumprod(1 + rng.normal(0, 0.02, (25, 3)), axis=0))
        outs = rng.uniform(-1, 1, (24, 3))
        cfg = BacktestConfig(compounding=False)
        a = run_backtest(panel, [allocate(OutputVector(o)) for o in outs], cfg)
        b = run_backtest(panel, [allocate(OutputVector(-o)) for o in outs], cfg)
        assert b.profit_pct == pytest.approx(-a.profit_pct, rel=1e-12)
        np.testing.assert_allclose(b.gross_pnl, -a.gross_pnl, rtol=1e-12)

    def test_direction_flip_negates_daily_growth(self, make_prices_panel):
        rng = np.random.default_rng(4)
        panel = make_prices_panel(100 * np.cumprod(1 + rng.normal(0, 0.02, (25, 3)), axis=0))
        outs = rng.uniform(-1, 1, (24, 3))
        a = run_backtest(panel, [allocate(OutputVector(o)) for o in outs])
        b = run_backtest(panel, [allocate(OutputVector(-o)) for o in outs])
        np.testing.assert_allclose(b.daily_returns(), -a.daily_returns(), rtol=1e-10, atol=1e-15)

    def test_loss_sign_matches_profit_sign(self, make_prices_panel):
        # when relative and absolute moves agree in sign, -L and the uncompounded PnL agree in sign
        rng = np.random.default_rng(5)
        cfg = LossConfig(LossVariant.STOCK_LOSS, smooth=False)
        checked = 0
        for _ in range(300):
            p0 = rng.uniform(10, 200, 4)
            p1 = p0 * (1 + rng.normal(0, 0.03, 4))
            o = rng.uniform(-1, 1, 4)
            loss = stock_loss(OutputVector(o), p1 - p0, cfg).value
            d = allocate(OutputVector(o))
            ledger = run_backtest(make_prices_panel([p0, p1]), [d], BacktestConfig(compounding=False))
            # per-stock PnL weighted by price level recovers the price-delta form of the loss
            weighted = float(np.sum(ledger.per_day_stock_pnl[0] * p0))
            assert np.sign(weighted) == np.sign(-loss)
            checked += 1
        assert checked == 300

    def test_buy_and_hold_equals_full_buy_single_stock(self, make_prices_panel):
        rng = np.random.default_rng(6)
        prices = 100 * np.cumprod(1 + rng.normal(0, 0.02, (40, 1)), axis=0)
        panel = make_prices_panel(prices)
        ledger = run_backtest(panel, [decision([1.0], [B])] * 39)
        assert ledger.profit_pct == pytest.approx(buy_and_hold(panel), rel=1e-12)


class TestBuyAndHold:
    def test_single_stock(self, make_prices_panel):
        assert buy_and_hold(make_prices_panel([[100.0], [103.0], [127.77]])) == pytest.approx(27.77, rel=1e-13)

    def test_constant(self, make_prices_panel):
        assert buy_and_hold(make_prices_panel(np.full((5, 3), 7.0))) == 0.0

    def test_symmetric_cancellation(self, make_prices_panel):
        assert buy_and_hold(make_prices_panel([[100.0, 100.0], [110.0, 90.0]])) == 0.0

    def test_needs_two_days(self, make_prices_panel):
        with pytest.raises(BacktestError):
            buy_and_hold(make_prices_panel([[100.0]]))


def brute_force_u_test(a, b):
    """Pair-counting U and the exact two-sided p-value over every regrouping of the pooled values."""
    def u_of(x, y):
        return sum((xi > yj) + 0.5 * (xi == yj) for xi in x for yj in y)

    pooled = list(a) + list(b)
    n1 = len(a)
    mean = n1 * len(b) / 2.0
    observed = u_of(a, b)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        rest = [pooled[i] for i in range(len(pooled)) if i not in idx]
        u = u_of([pooled[i] for i in idx], rest)
        total += 1
        hits += abs(u - mean) >= abs(observed - mean) - 1e-12
    return observed, hits / total


class TestMannWhitney:
    def test_separated_triples(self):
        res = mann_whitney_u([1, 2, 3], [10, 11, 12])
        assert res.statistic == 0.0
        assert res.pvalue == pytest.approx(0.1, rel=1e-15)
        assert res.method == "exact"

    def test_identical_samples(self):
        res = mann_whitney_u([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
        assert res.statistic == 8.0
        assert res.pvalue == 1.0

    def test_large_shift_n10(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 1, 10)
        res = mann_whitney_u(a, a + 100.0)
        assert res.method == "asymptotic"
        assert res.pvalue < 0.001

    def test_exact_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n1, n2 = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            # coarse values so ties are common
            a = rng.integers(0, 5, n1).astype(float)
            b = rng.integers(0, 5, n2).astype(float)
            res = mann_whitney_u(a, b)
            u, p = brute_force_u_test(a, b)
            assert res.method == "exact"
            assert res.statistic == u
            assert res.pvalue == pytest.approx(p, rel=1e-12)

    def test_asymptotic_matches_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n1, n2 = int(rng.integers(9, 40)), int(rng.integers(9, 40))
            a = np.round(rng.normal(0, 1, n1), 1)
            b = np.round(rng.normal(0.3, 1, n2), 1)
            res = mann_whitney_u(a, b)
            ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
            assert res.statistic == ref.statistic
            assert res.pvalue == pytest.approx(ref.pvalue, abs=1e-6)

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])
