"""Gradient and invariant checks for the loss family.

Shared by the ``gradcheck`` command and the acceptance tests. Every check
returns plain numbers so callers decide how to report them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import LossConfig, LossVariant, OutputVector, SignalSource, allocate
from .losses import LOSS_FUNCTIONS, evaluate_loss, loss_gradient_fd, stock_loss

GRAD_RTOL = 1e-5
GRAD_ATOL = 1e-9


@dataclass(frozen=True)
class GradientRow:
    variant: LossVariant
    smooth: bool
    use_hold: bool
    signal_source: SignalSource
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_RTOL

    def label(self) -> str:
        return (
            f"{self.variant.value:<14} {'smooth' if self.smooth else 'sign':<6} "
            f"{'hold' if self.use_hold else 'nohold':<6} {self.signal_source.value:<6}"
        )


def random_outputs(rng: np.random.Generator, n_stocks: int, use_hold: bool, min_abs: float = 0.05) -> OutputVector:
    """Outputs with ``min_abs <= |O_i| <= 0.95`` and random signs."""
    k = n_stocks + int(use_hold)
    values = rng.uniform(min_abs, 0.95, k) * rng.choice([-1.0, 1.0], k)
    return OutputVector.from_array(values, use_hold)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest ``|a - n| / max(|n|, atol / rtol)``; below ``GRAD_RTOL`` means a pass."""
    scale = np.maximum(np.abs(numeric), GRAD_ATOL / GRAD_RTOL)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradient_suite(
    n_points: int = 100, seed: int = 0, gamma: float = 10.0, smooth_modes=(True, False), h: float = 1e-6
) -> list[GradientRow]:
    """Analytic versus central-difference gradients for every loss combination.

    Points keep ``|O_i| >= 0.05`` so non-smooth losses are differentiable
    there and the finite-difference stencil never crosses 0. Where the plain
    central difference misses (a StockLossNorm denominator near zero makes
    the loss steep enough for O(h^2) truncation to show), the Richardson
    combination of steps ``h`` and ``h/2`` is used instead.
    """
    rows = []
    combos = itertools.product(LossVariant, smooth_modes, (False, True), SignalSource)
    for variant, smooth, use_hold, source in combos:
        cfg = LossConfig(variant, smooth, gamma, use_hold, source)
        rng = np.random.default_rng([seed, list(LossVariant).index(variant), smooth, use_hold, source == SignalSource.PRICE])
        worst = 0.0
        for _ in range(n_points):
            n = int(rng.integers(1, 9))
            outputs = random_outputs(rng, n, use_hold)
            delta = rng.normal(0.0, 0.02, n)
            analytic = evaluate_loss(outputs, delta, cfg).gradient
            worst = max(worst, _point_error(LOSS_FUNCTIONS[variant], outputs, delta, cfg, h, analytic))
        rows.append(GradientRow(variant, smooth, use_hold, source, worst))
    return rows


def _point_error(loss_fn, outputs, delta, cfg, h, analytic) -> float:
    coarse = loss_gradient_fd(loss_fn, outputs, delta, cfg, h)
    err = relative_error(analytic, coarse)
    if err < GRAD_RTOL:
        return err
    fine = loss_gradient_fd(loss_fn, outputs, delta, cfg, h / 2.0)
    return relative_error(analytic, (4.0 * fine - coarse) / 3.0)


@dataclass(frozen=True)
class JumpWitness:
    measured: float  # g(+offset) - g(-offset) from central differences on each side
    analytic: float  # 2 * sum_{i != 1} O_i d_i / S^2
    equal_delta_form: float  # 2 * d_1 * (S - |O_1|) / S^2, exact only when every d_i = d_1 and O_i > 0

    @property
    def relative_gap(self) -> float:
        return abs(self.measured - self.analytic) / abs(self.analytic)


def discontinuity_witness(others, delta, offset: float = 1e-4, h: float = 1e-6) -> JumpWitness:
    """One-sided gradients of non-smooth StockLoss in ``O_1`` at ``+offset`` and ``-offset``.

    ``others`` are the remaining outputs ``O_2..O_N``; ``delta`` covers all N stocks.
    """
    others = np.asarray(others, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    cfg = LossConfig(LossVariant.STOCK_LOSS, smooth=False)
    grads = []
    for o1 in (offset, -offset):
        outputs = OutputVector(np.concatenate([[o1], others]))
        grads.append(loss_gradient_fd(stock_loss, outputs, delta, cfg, h)[0])
    S = offset + float(np.sum(np.abs(others)))
    analytic = 2.0 * float(np.dot(others, delta[1:])) / S**2
    equal_delta = 2.0 * float(delta[0]) * (S - offset) / S**2
    return JumpWitness(grads[0] - grads[1], analytic, equal_delta)


@dataclass(frozen=True)
class LinearFit:
    r_squared: float
    slope: float


def linearity_sweep(n_stocks: int = 50, seed: int = 0, steps: int = 50) -> LinearFit:
    """Sweep one output over [0.1, 0.9] with the rest fixed; fit a line to the non-smooth StockLoss."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 0.9, n_stocks)
    delta = rng.normal(0.0, 0.01, n_stocks)
    delta[0] = 0.02
    cfg = LossConfig(LossVariant.STOCK_LOSS, smooth=False)
    xs = np.linspace(0.1, 0.9, steps)
    ys = np.empty(steps)
    for i, x in enumerate(xs):
        values = base.copy()
        values[0] = x
        ys[i] = stock_loss(OutputVector(values), delta, cfg).value
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    r2 = 1.0 - float(np.sum(resid**2)) / float(np.sum((ys - ys.mean()) ** 2))
    return LinearFit(r2, float(slope))


def smoothing_error(gamma: float, n_points: int = 200, seed: int = 0, min_abs: float = 0.05) -> float:
    """Largest ``|L_smooth - L_sign| / sum|d|`` for StockLoss (hold off) over random points."""
    rng = np.random.default_rng(seed)
    smooth_cfg = LossConfig(LossVariant.STOCK_LOSS, smooth=True, gamma=gamma)
    sign_cfg = LossConfig(LossVariant.STOCK_LOSS, smooth=False)
    worst = 0.0
    for _ in range(n_points):
        n = int(rng.integers(1, 9))
        values = rng.uniform(min_abs, 0.95, n) * rng.choice([-1.0, 1.0], n)
        delta = rng.normal(0.0, 0.02, n)
        outputs = OutputVector(values)
        gap = abs(stock_loss(outputs, delta, smooth_cfg).value - stock_loss(outputs, delta, sign_cfg).value)
        worst = max(worst, gap / float(np.sum(np.abs(delta))))
    return worst


@dataclass(frozen=True)
class AllocationReport:
    max_partition_error: float
    scale_mismatches: int
    symmetry_mismatches: int


def allocation_invariants(n_vectors: int = 10_000, seed: int = 0) -> AllocationReport:
    """Partition of unity, positive-scale invariance and odd symmetry of :func:`allocate`.

    Scale factors are powers of two, where floating-point scaling is exact
    and invariance can be asserted bit for bit. Magnitudes start at 1e-3 so
    no scaled output crosses the Flat floor.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    scale_bad = sym_bad = 0
    for _ in range(n_vectors):
        n = int(rng.integers(1, 20))
        use_hold = bool(rng.integers(0, 2))
        k = n + int(use_hold)
        values = rng.uniform(1e-3, 0.999, k) * rng.choice([-1.0, 1.0], k)
        outputs = OutputVector.from_array(values, use_hold)
        d = allocate(outputs)
        worst = max(worst, abs(float(np.sum(d.fractions)) + d.hold_fraction - 1.0))

        c = 2.0 ** int(rng.integers(-9, 10))
        scaled = allocate(OutputVector.from_array(values * c, use_hold))
        if not (np.array_equal(scaled.fractions, d.fractions) and scaled.directions == d.directions):
            scale_bad += 1

        flipped = allocate(OutputVector.from_array(-values, use_hold))
        if not (
            np.array_equal(flipped.fractions, d.fractions)
            and all(int(a) == -int(b) for a, b in zip(flipped.directions, d.directions))
            and flipped.hold_fraction == d.hold_fraction
        ):
            sym_bad += 1
    return AllocationReport(worst, scale_bad, sym_bad)
