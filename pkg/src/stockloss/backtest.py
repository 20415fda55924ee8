"""Daily-rebalancing backtest, buy-and-hold baseline and the Mann-Whitney U test.

Trade semantics: at the close of day ``t`` the budget is split by the
allocation; each stock earns ``fraction * direction * (P[t+1] - P[t]) / P[t]``
by the next close, the hold share earns nothing, and everything is settled
daily (no positions carry over).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import AllocationDecision
from .data import FeaturePanel


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class BacktestConfig:
    initial_budget: float = 10_000.0
    compounding: bool = True
    transaction_cost_bps: float = 0.0

    def __post_init__(self):
        if not self.initial_budget > 0:
            raise ValueError("initial_budget must be positive")
        if not self.transaction_cost_bps >= 0:
            raise ValueError("transaction_cost_bps must be non-negative")


@dataclass(frozen=True)
class BacktestLedger:
    dates: np.ndarray = field(repr=False)  # length T + 1, the date each capital value is marked
    daily_capital: np.ndarray = field(repr=False)  # length T + 1
    per_day_stock_pnl: np.ndarray = field(repr=False)  # T x N relative PnL
    gross_pnl: np.ndarray = field(repr=False)  # T, currency
    cost: np.ndarray = field(repr=False)  # T, currency
    profit_pct: float = 0.0

    @property
    def n_days(self) -> int:
        return int(self.per_day_stock_pnl.shape[0])

    @property
    def final_capital(self) -> float:
        return float(self.daily_capital[-1])

    def daily_returns(self) -> np.ndarray:
        c = self.daily_capital
        return (c[1:] - c[:-1]) / c[:-1]

    def max_drawdown_pct(self) -> float:
        c = self.daily_capital
        peak = np.maximum.accumulate(c)
        return float(np.max((peak - c) / peak) * 100.0)

    def summary(self) -> dict[str, float]:
        r = self.daily_returns()
        return {
            "profit_pct": self.profit_pct,
            "final_capital": self.final_capital,
            "max_drawdown_pct": self.max_drawdown_pct(),
            "daily_pnl_mean": float(np.mean(r)) if r.size else 0.0,
            "daily_pnl_std": float(np.std(r)) if r.size else 0.0,
            "trading_days": float(self.n_days),
        }

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "date", "capital", "gross_pnl", "cost"])
            w.writerow([0, str(self.dates[0]), repr(float(self.daily_capital[0])), "0.0", "0.0"])
            for t in range(self.n_days):
                w.writerow(
                    [
                        t + 1,
                        str(self.dates[t + 1]),
                        repr(float(self.daily_capital[t + 1])),
                        repr(float(self.gross_pnl[t])),
                        repr(float(self.cost[t])),
                    ]
                )


def _relative_moves(panel: FeaturePanel) -> np.ndarray:
    prices = panel.prices
    if np.any(~(prices > 0)):
        raise BacktestError("non-positive price encountered")
    return (prices[1:] - prices[:-1]) / prices[:-1]


def ledger_from_exposure(
    panel: FeaturePanel, exposure: np.ndarray, gross_fraction: np.ndarray, cfg: BacktestConfig
) -> BacktestLedger:
    """Backtest from arrays: signed per-stock exposure ``(T, N)`` and invested share ``(T,)``.

    ``T`` must be ``panel.n_days - 1``; the last panel day opens no trade.
    """
    moves = _relative_moves(panel)
    exposure = np.asarray(exposure, dtype=np.float64)
    if exposure.shape != moves.shape:
        raise BacktestError(f"{exposure.shape[0]} decisions for a panel needing {moves.shape[0]} (one per day but the last)")
    stock_pnl = exposure * moves
    day_pnl = stock_pnl.sum(axis=1)
    cost_rate = cfg.transaction_cost_bps / 1e4 * np.asarray(gross_fraction, dtype=np.float64)

    T = day_pnl.size
    capital = np.empty(T + 1)
    capital[0] = cfg.initial_budget
    gross = np.empty(T)
    cost = np.empty(T)
    a0 = cfg.initial_budget
    for t in range(T):
        base = capital[t] if cfg.compounding else a0
        gross[t] = base * day_pnl[t]
        cost[t] = base * cost_rate[t]
        capital[t + 1] = capital[t] + gross[t] - cost[t]
    profit = (capital[-1] - capital[0]) / capital[0] * 100.0
    return BacktestLedger(panel.dates.copy(), capital, stock_pnl, gross, cost, float(profit))


def run_backtest(
    panel: FeaturePanel, decisions: Sequence[AllocationDecision], cfg: Optional[BacktestConfig] = None
) -> BacktestLedger:
    cfg = cfg or BacktestConfig()
    if len(decisions) != panel.n_days - 1:
        raise BacktestError(f"{len(decisions)} decisions for a {panel.n_days}-day panel; expected {panel.n_days - 1}")
    for d in decisions:
        if d.n_stocks != panel.n_stocks:
            raise BacktestError(f"decision covers {d.n_stocks} stocks, panel has {panel.n_stocks}")
    exposure = np.array([d.signed_exposure() for d in decisions]).reshape(len(decisions), panel.n_stocks)
    invested = np.array([float(np.sum(d.fractions)) for d in decisions])
    return ledger_from_exposure(panel, exposure, invested, cfg)


def buy_and_hold(panel: FeaturePanel) -> float:
    """Profit % from buying one share of every stock on the first day and selling on the last."""
    if panel.n_days < 2:
        raise BacktestError("buy-and-hold needs at least two days")
    first = float(np.sum(panel.prices[0]))
    last = float(np.sum(panel.prices[-1]))
    return (last - first) / first * 100.0


class MannWhitneyResult(NamedTuple):
    statistic: float
    pvalue: float
    method: str


EXACT_MAX_PER_SIDE = 8


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; the statistic is U for ``sample_a``.

    Exact permutation distribution (midranks, so ties are handled) when both
    samples have at most 8 values, otherwise the normal approximation with
    tie correction and continuity correction.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    n = n1 + n2
    ranks = _midranks(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mean = n1 * n2 / 2.0

    if n1 <= EXACT_MAX_PER_SIDE and n2 <= EXACT_MAX_PER_SIDE:
        observed = abs(u - mean)
        offset = n1 * (n1 + 1) / 2.0
        hits = total = 0
        for combo in itertools.combinations(range(n), n1):
            total += 1
            dev = abs(ranks[list(combo)].sum() - offset - mean)
            if dev >= observed - 1e-9:
                hits += 1
        return MannWhitneyResult(u, min(1.0, hits / total), "exact")

    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return MannWhitneyResult(u, 1.0, "asymptotic")
    z = (abs(u - mean) - 0.5) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(u, min(1.0, max(0.0, p)), "asymptotic")
