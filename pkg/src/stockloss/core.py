"""Domain types and the allocation head.

A forecasting network ends in ``N`` tanh units (one per stock) plus an
optional "hold" unit. :func:`allocate` turns those raw outputs into budget
fractions and trade directions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_EPSILON_FLOOR = 1e-6
DEFAULT_GAMMA = 10.0
DEFAULT_DENOM_EPSILON = 1e-8


class Direction(enum.IntEnum):
    SHORT = -1
    FLAT = 0
    BUY = 1


class LossVariant(str, enum.Enum):
    STOCK_LOSS = "StockLoss"
    STOCK_LOSS_MAX = "StockLossMax"
    STOCK_LOSS_L2 = "StockLossL2"
    STOCK_LOSS_NORM = "StockLossNorm"


class SignalSource(str, enum.Enum):
    RETURN = "Return"
    PRICE = "Price"


def _as_finite_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains a non-finite value")
    return arr


@dataclass(frozen=True)
class OutputVector:
    """Raw network outputs: one value per stock and an optional hold value."""

    stock_outputs: np.ndarray
    hold_output: Optional[float] = None

    def __post_init__(self):
        arr = _as_finite_array(self.stock_outputs, "stock_outputs")
        if arr.size < 1:
            raise ValueError("OutputVector needs at least one stock output")
        arr.setflags(write=False)
        object.__setattr__(self, "stock_outputs", arr)
        if self.hold_output is not None:
            hold = float(self.hold_output)
            if not math.isfinite(hold):
                raise ValueError("hold_output is non-finite")
            object.__setattr__(self, "hold_output", hold)

    @classmethod
    def from_array(cls, values: Sequence[float], use_hold: bool) -> "OutputVector":
        """Split a flat ``[stocks..., hold]`` vector as produced by a model head."""
        arr = np.asarray(values, dtype=np.float64)
        if use_hold:
            return cls(arr[:-1], float(arr[-1]))
        return cls(arr)

    @property
    def n_stocks(self) -> int:
        return int(self.stock_outputs.size)

    @property
    def has_hold(self) -> bool:
        return self.hold_output is not None

    def as_array(self) -> np.ndarray:
        """All node outputs, hold last when present."""
        if self.hold_output is None:
            return self.stock_outputs.copy()
        return np.append(self.stock_outputs, self.hold_output)

    def in_open_unit_interval(self) -> bool:
        return bool(np.all(np.abs(self.as_array()) < 1.0))


@dataclass(frozen=True)
class AllocationDecision:
    fractions: np.ndarray
    directions: tuple[Direction, ...]
    hold_fraction: float
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR

    @property
    def n_stocks(self) -> int:
        return len(self.directions)

    def signed_exposure(self) -> np.ndarray:
        """Per-stock ``fraction * direction``."""
        return self.fractions * np.array([int(d) for d in self.directions], dtype=np.float64)

    @classmethod
    def hold_all(cls, n_stocks: int, epsilon_floor: float = DEFAULT_EPSILON_FLOOR):
        return cls(np.zeros(n_stocks), (Direction.FLAT,) * n_stocks, 1.0, epsilon_floor)


@dataclass(frozen=True)
class LossConfig:
    variant: LossVariant = LossVariant.STOCK_LOSS
    smooth: bool = False
    gamma: float = DEFAULT_GAMMA
    use_hold: bool = False
    signal_source: SignalSource = SignalSource.RETURN
    denom_epsilon: float = DEFAULT_DENOM_EPSILON
    # StockLossL2 only: weight each squared term by (1 + s_i * sign(delta_i)) / 2 so
    # wrong-way bets earn nothing. False gives the bare, direction-blind form.
    l2_direction_gate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        object.__setattr__(self, "signal_source", SignalSource(self.signal_source))
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.denom_epsilon > 0:
            raise ValueError(f"denom_epsilon must be positive, got {self.denom_epsilon}")


@dataclass(frozen=True)
class LossEvaluation:
    value: float
    gradient: np.ndarray = field(repr=False)

    def __post_init__(self):
        grad = np.asarray(self.gradient, dtype=np.float64)
        if not math.isfinite(self.value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError("loss evaluation produced a non-finite value")
        object.__setattr__(self, "gradient", grad)


def sign_proxy(x, gamma: float = DEFAULT_GAMMA, smooth: bool = False):
    """``sign(x)`` (with ``sign(0) = 0``) or its smooth stand-in ``tanh(gamma * x)``.

    Works elementwise on arrays; scalars in give a float back.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    out = np.tanh(gamma * np.asarray(x, dtype=np.float64)) if smooth else np.sign(x).astype(np.float64)
    if np.ndim(out) == 0:
        return float(out)
    return out


def allocate(outputs: OutputVector, epsilon_floor: float = DEFAULT_EPSILON_FLOOR) -> AllocationDecision:
    """Map raw outputs to budget fractions ``|O_i| / sum_j |O_j|`` and directions.

    The hold node, when present, sits in the denominator like any stock.
    Stocks with ``|O_i| < epsilon_floor`` are Flat and their share moves to
    the hold fraction. If every node is below the floor, everything is held.
    """
    stocks = outputs.stock_outputs
    n = stocks.size
    mags = np.abs(stocks)
    hold_mag = abs(outputs.hold_output) if outputs.hold_output is not None else 0.0

    active = mags >= epsilon_floor
    if not active.any() and hold_mag < epsilon_floor:
        return AllocationDecision.hold_all(n, epsilon_floor)

    total = float(mags.sum()) + hold_mag
    raw = mags / total
    fractions = np.where(active, raw, 0.0)
    hold_fraction = hold_mag / total + float(raw[~active].sum())
    directions = tuple(
        Direction.BUY if o >= epsilon_floor else Direction.SHORT if o <= -epsilon_floor else Direction.FLAT
        for o in stocks
    )
    return AllocationDecision(fractions, directions, hold_fraction, epsilon_floor)


def allocate_many(outputs: np.ndarray, has_hold: bool, epsilon_floor: float = DEFAULT_EPSILON_FLOOR):
    """Vectorized :func:`allocate` over rows of ``outputs`` (``B x n_nodes``).

    Returns ``(signed_exposure, fractions, hold_fraction)`` with shapes
    ``(B, N)``, ``(B, N)`` and ``(B,)``. Row for row it agrees with
    :func:`allocate`.
    """
    O = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if not np.all(np.isfinite(O)):
        raise ValueError("outputs contain a non-finite value")
    stocks = O[:, :-1] if has_hold else O
    mags = np.abs(stocks)
    hold_mag = np.abs(O[:, -1]) if has_hold else np.zeros(O.shape[0])
    active = mags >= epsilon_floor
    degenerate = ~active.any(axis=1) & (hold_mag < epsilon_floor)
    total = mags.sum(axis=1) + hold_mag
    total = np.where(degenerate, 1.0, total)
    raw = mags / total[:, None]
    fractions = np.where(active, raw, 0.0)
    hold = hold_mag / total + np.where(active, 0.0, raw).sum(axis=1)
    hold = np.where(degenerate, 1.0, hold)
    fractions[degenerate] = 0.0
    directions = np.where(stocks >= epsilon_floor, 1.0, np.where(stocks <= -epsilon_floor, -1.0, 0.0))
    return fractions * directions, fractions, hold
