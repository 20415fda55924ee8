import numpy as np
import pytest

from stockloss.data import FEATURE_INDEX, FeaturePanel, business_days, synth_market, trend_regimes


def panel_from_prices(prices, start="2020-01-06", shares=1e6):
    """Panel whose price/return/market-cap columns follow ``prices`` (T x N) exactly."""
    prices = np.asarray(prices, dtype=np.float64)
    T, N = prices.shape
    base = synth_market(N, max(T, 2), seed=0, start_date=start)
    values = base.values[:T].copy()
    values[:, :, FEATURE_INDEX["price"]] = prices
    ret = np.zeros_like(prices)
    ret[1:] = (prices[1:] - prices[:-1]) / prices[:-1]
    values[:, :, FEATURE_INDEX["return"]] = ret
    values[:, :, FEATURE_INDEX["shares_outstanding"]] = shares
    values[:, :, FEATURE_INDEX["market_cap"]] = prices * shares
    return FeaturePanel(business_days(start, T), tuple(f"T{i}" for i in range(N)), values)


@pytest.fixture
def make_prices_panel():
    return panel_from_prices


@pytest.fixture(scope="session")
def trend_panel():
    """Five calendar years, three up-drifting and three down-drifting stocks out of ten."""
    drifts, vols = trend_regimes(10, 3, 3, drift=1e-3, vol=1e-3)
    return synth_market(10, 1304, seed=100, drifts=drifts, vols=vols, start_date="2019-01-01")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
