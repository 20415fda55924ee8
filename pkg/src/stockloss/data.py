"""Market panels: CSV ingestion, year-based splits and a seeded synthetic market."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURES = (
    "volume_change",
    "bid_ask_spread",
    "illiquidity",
    "turnover",
    "price",
    "return",
    "shares_outstanding",
    "market_cap",
)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURES)}
CSV_COLUMNS = ("date", "ticker") + FEATURES
IDENTITY_RTOL = 1e-6


class PanelError(ValueError):
    pass


class MissingColumnError(PanelError):
    pass


class PanelParseError(PanelError):
    pass


class DuplicateCellError(PanelError):
    pass


class PanelGap(PanelError):
    pass


class InsufficientHistoryError(PanelError):
    pass


class PanelValidationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FeaturePanel:
    """Dense ``T x N x 8`` panel of daily features, one row per trading date."""

    dates: np.ndarray  # datetime64[D]
    tickers: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        values = np.asarray(self.values, dtype=np.float64)
        tickers = tuple(self.tickers)
        if values.shape != (dates.size, len(tickers), len(FEATURES)):
            raise PanelError(f"values shape {values.shape} does not match {dates.size} dates x {len(tickers)} tickers")
        if dates.size > 1 and not np.all(np.diff(dates) > np.timedelta64(0, "D")):
            raise PanelError("dates must be strictly increasing")
        if len(set(tickers)) != len(tickers):
            raise PanelError("duplicate tickers")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "tickers", tickers)
        object.__setattr__(self, "values", values)

    @property
    def n_days(self) -> int:
        return int(self.dates.size)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    def feature(self, name: str) -> np.ndarray:
        """``T x N`` slice of one feature."""
        return self.values[:, :, FEATURE_INDEX[name]]

    @property
    def prices(self) -> np.ndarray:
        return self.feature("price")

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(int) + 1970

    def slice_days(self, start: int, stop: int) -> "FeaturePanel":
        return FeaturePanel(self.dates[start:stop], self.tickers, self.values[start:stop])

    def identity_violations(self) -> list[str]:
        """Rows breaking the market-cap or return identities."""
        price = self.prices
        cap = self.feature("market_cap")
        shares = self.feature("shares_outstanding")
        ret = self.feature("return")
        problems = []
        bad_cap = ~np.isclose(cap, price * shares, rtol=IDENTITY_RTOL, atol=0.0)
        for t, i in zip(*np.nonzero(bad_cap)):
            problems.append(f"{self.dates[t]} {self.tickers[i]}: market_cap != price * shares_outstanding")
        if self.n_days > 1:
            implied = (price[1:] - price[:-1]) / price[:-1]
            bad_ret = ~np.isclose(ret[1:], implied, rtol=IDENTITY_RTOL, atol=1e-12)
            for t, i in zip(*np.nonzero(bad_ret)):
                problems.append(f"{self.dates[t + 1]} {self.tickers[i]}: return inconsistent with price change")
        return problems

    def check_positive(self) -> None:
        for name in ("price", "shares_outstanding"):
            col = self.feature(name)
            bad = np.argwhere(~(col > 0))
            if bad.size:
                t, i = bad[0]
                raise PanelError(f"{name} must be positive: {self.dates[t]} {self.tickers[i]} = {col[t, i]}")


def _format_number(x: float) -> str:
    # repr is the shortest string that round-trips the float exactly
    return repr(float(x))


def save_csv(panel: FeaturePanel, path) -> None:
    """Write the long-format panel (one row per date x ticker)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for t, day in enumerate(panel.dates):
            iso = str(day)
            for i, ticker in enumerate(panel.tickers):
                writer.writerow([iso, ticker, *(_format_number(v) for v in panel.values[t, i])])


def load_csv(path) -> FeaturePanel:
    """Read and validate a long-format panel CSV.

    Structural problems (missing column, bad number, duplicate or missing
    cell, non-positive price/shares) raise. Identity violations only warn,
    since real data is taken as-is.
    """
    path = Path(path)
    cells: dict[tuple[np.datetime64, str], list[float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                day = np.datetime64(dt.date.fromisoformat(row["date"].strip()), "D")
            except (ValueError, AttributeError) as exc:
                raise PanelParseError(f"{path}:{lineno}: bad date {row['date']!r}") from exc
            ticker = (row["ticker"] or "").strip()
            if not ticker:
                raise PanelParseError(f"{path}:{lineno}: empty ticker")
            vals = []
            for name in FEATURES:
                raw = row[name]
                try:
                    v = float(raw)
                except (TypeError, ValueError) as exc:
                    raise PanelParseError(f"{path}:{lineno}: column {name}: unparseable value {raw!r}") from exc
                if not math.isfinite(v):
                    raise PanelParseError(f"{path}:{lineno}: column {name}: non-finite value {raw!r}")
                vals.append(v)
            key = (day, ticker)
            if key in cells:
                raise DuplicateCellError(f"{path}:{lineno}: duplicate row for ({day}, {ticker})")
            cells[key] = vals

    if not cells:
        raise PanelError(f"{path}: no data rows")
    dates = np.array(sorted({d for d, _ in cells}), dtype="datetime64[D]")
    tickers = tuple(sorted({tk for _, tk in cells}))
    values = np.empty((dates.size, len(tickers), len(FEATURES)))
    for t, day in enumerate(dates):
        for i, tk in enumerate(tickers):
            try:
                values[t, i] = cells[(day, tk)]
            except KeyError:
                raise PanelGap(f"{path}: missing cell (date={day}, ticker={tk})") from None

    panel = FeaturePanel(dates, tickers, values)
    panel.check_positive()
    problems = panel.identity_violations()
    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        warnings.warn(f"{path}: {len(problems)} identity violation(s): {shown}{more}", PanelValidationWarning, stacklevel=2)
    return panel


@dataclass(frozen=True)
class SplitSpec:
    test_year: int


class SplitBounds(NamedTuple):
    """Half-open day-index ranges into the source panel."""

    train: range
    validation: range
    test: range


class PanelSplit(NamedTuple):
    train: FeaturePanel
    validation: FeaturePanel
    test: FeaturePanel


def split_bounds(panel: FeaturePanel, spec: SplitSpec) -> SplitBounds:
    years = panel.years
    y = spec.test_year
    for need, label in ((y, "test"), (y - 1, "validation")):
        if not np.any(years == need):
            raise InsufficientHistoryError(f"no {label} data for year {need}")
    if not np.any(years < y - 1):
        raise InsufficientHistoryError(f"no training data before {y - 1}")
    # dates are sorted, so each year block is contiguous
    val_start = int(np.argmax(years == y - 1))
    test_start = int(np.argmax(years == y))
    test_stop = int(np.searchsorted(years, y, side="right"))
    return SplitBounds(range(0, val_start), range(val_start, test_start), range(test_start, test_stop))


def split(panel: FeaturePanel, spec: SplitSpec) -> PanelSplit:
    """Train = years before ``test_year - 1``; validation = ``test_year - 1``; test = ``test_year``.

    Rows after the test year are dropped. Use :func:`split_bounds` when a
    window needs lookback context from before its split.
    """
    b = split_bounds(panel, spec)
    return PanelSplit(*(panel.slice_days(r.start, r.stop) for r in b))


def business_days(start: str | dt.date, n_days: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n_days), roll="forward")


def business_days_between(start: str, stop: str) -> int:
    return int(np.busday_count(np.datetime64(start, "D"), np.datetime64(stop, "D")))


def synth_market(
    n_stocks: int,
    n_days: int,
    seed: int,
    drifts: Optional[Sequence[float]] = None,
    vols: Optional[Sequence[float]] = None,
    start_date: str = "1994-01-03",
    initial_price: Optional[Sequence[float]] = None,
) -> FeaturePanel:
    """Seeded geometric Brownian motion panel with plausible side features.

    Prices follow ``P_t = P_0 (1 + drift)^t exp(W_t)`` where ``W`` is a
    random walk with steps ``vol * Z - vol^2 / 2``; with ``vol = 0`` this is
    exact compound growth. Returns, market cap, turnover and illiquidity are
    derived from the simulated prices and volumes so the panel identities
    hold by construction.
    """
    if n_stocks < 1 or n_days < 2:
        raise ValueError("need n_stocks >= 1 and n_days >= 2")
    drifts = np.zeros(n_stocks) if drifts is None else np.asarray(drifts, dtype=np.float64)
    vols = np.full(n_stocks, 0.02) if vols is None else np.asarray(vols, dtype=np.float64)
    if drifts.shape != (n_stocks,) or vols.shape != (n_stocks,):
        raise ValueError("drifts and vols need one entry per stock")
    if np.any(vols < 0) or not np.all(np.isfinite(vols)):
        raise ValueError("volatility must be finite and non-negative")
    if np.any(drifts <= -1) or not np.all(np.isfinite(drifts)):
        raise ValueError("drift must be finite and > -1")

    rng = np.random.default_rng(seed)
    p0 = rng.uniform(20.0, 200.0, n_stocks) if initial_price is None else np.asarray(initial_price, dtype=np.float64)
    # one extra leading day (t = -1) so the first row's return is defined;
    # the walk is pinned to 0 at t = 0 so row 0 carries exactly p0
    steps = np.arange(-1, n_days)[:, None]
    shocks = rng.standard_normal((n_days, n_stocks)) * vols - 0.5 * vols**2
    walk = np.vstack([-shocks[:1], np.zeros((1, n_stocks)), np.cumsum(shocks[1:], axis=0)])
    prices = p0 * (1.0 + drifts) ** steps * np.exp(walk)
    returns = (prices[1:] - prices[:-1]) / prices[:-1]
    prices = prices[1:]

    shares = np.round(rng.uniform(1e8, 5e9, n_stocks))
    shares = np.broadcast_to(shares, (n_days, n_stocks))
    base_turnover = rng.uniform(0.002, 0.02, n_stocks)
    turnover_path = base_turnover * rng.lognormal(0.0, 0.3, (n_days + 1, n_stocks))
    turnover_path = np.clip(turnover_path, 1e-5, 0.199)
    volume = np.round(turnover_path * shares[0])
    volume = np.maximum(volume, 1.0)
    volume_change = (volume[1:] - volume[:-1]) / volume[:-1]
    volume = volume[1:]
    turnover = volume / shares
    spread = rng.uniform(1e-4, 0.01, (n_days, n_stocks))
    illiquidity = np.abs(returns) / (volume * prices)  # Amihud: |return| per unit of dollar volume

    values = np.stack(
        [volume_change, spread, illiquidity, turnover, prices, returns, shares, prices * shares],
        axis=-1,
    )
    tickers = tuple(f"S{i:03d}" for i in range(n_stocks))
    return FeaturePanel(business_days(start_date, n_days), tickers, values)


def trend_regimes(n_stocks: int, n_up: int, n_down: int, drift: float = 1e-3, vol: float = 0.01):
    """Drift/vol arrays: the first ``n_up`` stocks drift up, the next ``n_down`` down, the rest flat."""
    if n_up + n_down > n_stocks:
        raise ValueError("more trending stocks than stocks")
    drifts = np.zeros(n_stocks)
    drifts[:n_up] = drift
    drifts[n_up : n_up + n_down] = -drift
    return drifts, np.full(n_stocks, vol)
