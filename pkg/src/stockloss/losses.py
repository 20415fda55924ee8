"""Trading losses over tanh-bounded outputs, with analytic gradients.

Every loss is written in terms of three per-node quantities:

* ``m`` -- the magnitude used for budget shares: ``|O|``, or ``O * tanh(gamma O)``
  in smooth mode (differentiable at 0, tends to ``|O|`` as gamma grows);
* ``s`` -- the direction: ``sign(O)`` or ``tanh(gamma O)``;
* ``V = m / sum(m)`` -- budget fractions, the hold node included when enabled.

The batched kernels (``*_batch``) take outputs of shape ``(B, n_nodes)`` and
deltas of shape ``(B, N)`` and return per-row values and ``dL/dO``. The
single-step functions wrap them with ``B = 1``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import LossConfig, LossEvaluation, LossVariant, OutputVector, SignalSource


class LossInputError(ValueError):
    pass


def signal_delta(returns_or_prices: np.ndarray, t: int) -> np.ndarray:
    """``x[t + 1] - x[t]`` for a ``(T, N)`` array of returns or prices."""
    x = np.asarray(returns_or_prices, dtype=np.float64)
    return x[t + 1] - x[t]


def signal_column(cfg: LossConfig) -> str:
    return "price" if cfg.signal_source == SignalSource.PRICE else "return"


def _magnitude_and_direction(O: np.ndarray, cfg: LossConfig):
    """Return ``m, dm/dO, s, ds/dO`` elementwise."""
    if cfg.smooth:
        t = np.tanh(cfg.gamma * O)
        dt = cfg.gamma * (1.0 - t * t)
        return O * t, t + O * dt, t, dt
    s = np.sign(O)
    return np.abs(O), s, s, np.zeros_like(O)


def _logistic(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _direction_gate(O: np.ndarray, sd: np.ndarray, cfg: LossConfig):
    """``(1 + s * sd) / 2`` and its derivative w.r.t. ``O``.

    In smooth mode this equals ``logistic(2 gamma O sd)``, which is evaluated
    directly to avoid cancellation in ``1 - tanh`` for confident wrong bets.
    """
    if not cfg.smooth:
        return 0.5 * (1.0 + np.sign(O) * sd), np.zeros_like(O)
    x = 2.0 * cfg.gamma * O * sd
    gate = _logistic(x)
    return gate, 2.0 * cfg.gamma * sd * gate * _logistic(-x)


def _shares(m: np.ndarray):
    total = m.sum(axis=1, keepdims=True)
    # all-zero outputs: shares are 0 and dm/dO is 0 there, so any positive stand-in works
    total = np.where(total > 0, total, 1.0)
    return m / total, total


def _share_vjp(g_V: np.ndarray, V: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Pull ``dL/dV`` back to ``dL/dm`` through ``V = m / sum(m)``."""
    return (g_V - np.sum(g_V * V, axis=1, keepdims=True)) / total


def _guard(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamp ``|x|`` to at least ``eps``, keeping the sign (0 counts as positive)."""
    small = np.abs(x) < eps
    return np.where(small, np.where(x < 0, -eps, eps), x), small


def _check(O: np.ndarray, delta: np.ndarray, cfg: LossConfig):
    O = np.atleast_2d(np.asarray(O, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    n_nodes = delta.shape[1] + (1 if cfg.use_hold else 0)
    if O.shape != (delta.shape[0], n_nodes):
        raise LossInputError(
            f"outputs shape {O.shape} does not match {delta.shape[1]} stocks"
            f"{' + hold' if cfg.use_hold else ''} over {delta.shape[0]} steps"
        )
    if not (np.all(np.isfinite(O)) and np.all(np.isfinite(delta))):
        raise LossInputError("non-finite loss input")
    return O, delta


def _denominator_max(delta: np.ndarray, eps: float) -> np.ndarray:
    # max over stocks of the raw deltas (not of |delta|); treated as a constant
    D, _ = _guard(delta.max(axis=1, keepdims=True), eps)
    return D


def stock_loss_batch(O, delta, cfg: LossConfig):
    """``-(sum V_i d_i s_i + [hold] H)``."""
    O, delta = _check(O, delta, cfg)
    return _linear_profit(O, delta, cfg, offset=0.0)


def stock_loss_max_batch(O, delta, cfg: LossConfig):
    """``1 - sum V_i (d_i / D) s_i - [hold] H`` with ``D = max_j d_j``."""
    O, delta = _check(O, delta, cfg)
    return _linear_profit(O, delta / _denominator_max(delta, cfg.denom_epsilon), cfg, offset=1.0)


def _linear_profit(O, scaled, cfg, offset):
    N = scaled.shape[1]
    m, dm, s, ds = _magnitude_and_direction(O, cfg)
    V, total = _shares(m)
    a = scaled * s[:, :N]
    profit = np.sum(V[:, :N] * a, axis=1)
    g_V = np.empty_like(V)
    g_V[:, :N] = -a
    if cfg.use_hold:
        profit = profit + V[:, N]
        g_V[:, N] = -1.0
    g_m = _share_vjp(g_V, V, total)
    g_s = np.zeros_like(O)
    g_s[:, :N] = -V[:, :N] * scaled
    return offset - profit, g_m * dm + g_s * ds


def stock_loss_l2_batch(O, delta, cfg: LossConfig):
    """``1 - sqrt(sum V_i g_i (d_i / D)^2 + [hold] H^2)``.

    ``g_i = (1 + s_i sign(d_i)) / 2`` gates each squared term by whether the
    bet points the right way: 1 for a correct bet, 0 for a wrong one (a
    smooth blend in between for smooth mode). When every bet is right this
    is exactly the bare L2 form; without the gate the loss would be even in
    every output and could not teach direction. ``cfg.l2_direction_gate =
    False`` drops the gate. The radicand is floored at ``denom_epsilon**2``.
    """
    O, delta = _check(O, delta, cfg)
    N = delta.shape[1]
    m, dm, s, ds = _magnitude_and_direction(O, cfg)
    V, total = _shares(m)
    b = (delta / _denominator_max(delta, cfg.denom_epsilon)) ** 2
    if cfg.l2_direction_gate:
        gate, dgate = _direction_gate(O[:, :N], np.sign(delta), cfg)
    else:
        gate, dgate = np.ones_like(b), np.zeros_like(b)
    radicand = np.sum(V[:, :N] * b * gate, axis=1)
    g_V = np.empty_like(V)
    g_V[:, :N] = b * gate
    if cfg.use_hold:
        H = V[:, N]
        radicand = radicand + H * H
        g_V[:, N] = 2.0 * H
    floor = cfg.denom_epsilon**2
    floored = radicand < floor
    root = np.sqrt(np.where(floored, floor, radicand))
    dL_dR = np.where(floored, 0.0, -0.5 / root)[:, None]
    g_m = _share_vjp(g_V * dL_dR, V, total)
    grad = g_m * dm
    grad[:, :N] += dL_dR * V[:, :N] * b * dgate
    return 1.0 - root, grad


def stock_loss_norm_batch(O, delta, cfg: LossConfig):
    """``1 - sum_i m_i d_i s_i / sum_j m_j d_j - [hold] H``.

    The denominator runs over stocks only and is clamped away from zero
    (sign kept); once clamped it carries no gradient.
    """
    O, delta = _check(O, delta, cfg)
    N = delta.shape[1]
    m, dm, s, ds = _magnitude_and_direction(O, cfg)
    ms = m[:, :N]
    raw_G = np.sum(ms * delta, axis=1)
    G, clamped = _guard(raw_G, cfg.denom_epsilon)
    num = np.sum(ms * delta * s[:, :N], axis=1)
    ratio = num / G
    g_m = np.zeros_like(O)
    g_s = np.zeros_like(O)
    # d(-num/G)/dm_k = -(d_k s_k)/G + num d_k / G^2   (second term only when G is live)
    live = np.where(clamped, 0.0, ratio / G)
    g_m[:, :N] = -(delta * s[:, :N]) / G[:, None] + delta * live[:, None]
    g_s[:, :N] = -(ms * delta) / G[:, None]
    value = 1.0 - ratio
    if cfg.use_hold:
        V, total = _shares(m)
        value = value - V[:, N]
        g_V = np.zeros_like(V)
        g_V[:, N] = -1.0
        g_m = g_m + _share_vjp(g_V, V, total)
    return value, g_m * dm + g_s * ds


BATCH_KERNELS: dict[LossVariant, Callable] = {
    LossVariant.STOCK_LOSS: stock_loss_batch,
    LossVariant.STOCK_LOSS_MAX: stock_loss_max_batch,
    LossVariant.STOCK_LOSS_L2: stock_loss_l2_batch,
    LossVariant.STOCK_LOSS_NORM: stock_loss_norm_batch,
}


def batch_loss(O: np.ndarray, delta: np.ndarray, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Mean loss over a batch of steps and its gradient w.r.t. each row of ``O``."""
    values, grads = BATCH_KERNELS[cfg.variant](O, delta, cfg)
    B = values.shape[0]
    # np.sum reduces in index order for a fixed shape, which keeps runs reproducible
    return float(np.sum(values)) / B, grads / B


def _evaluate(kernel, variant: LossVariant, outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    if cfg.variant != variant:
        raise LossInputError(f"config variant {cfg.variant.value} used with {variant.value}")
    if outputs.has_hold != cfg.use_hold:
        raise LossInputError(
            f"use_hold={cfg.use_hold} but the output vector {'has' if outputs.has_hold else 'lacks'} a hold node"
        )
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (outputs.n_stocks,):
        raise LossInputError(f"delta has shape {delta.shape}, expected ({outputs.n_stocks},)")
    values, grads = kernel(outputs.as_array()[None, :], delta[None, :], cfg)
    return LossEvaluation(float(values[0]), grads[0])


def stock_loss(outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    return _evaluate(stock_loss_batch, LossVariant.STOCK_LOSS, outputs, delta, cfg)


def stock_loss_max(outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    return _evaluate(stock_loss_max_batch, LossVariant.STOCK_LOSS_MAX, outputs, delta, cfg)


def stock_loss_l2(outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    return _evaluate(stock_loss_l2_batch, LossVariant.STOCK_LOSS_L2, outputs, delta, cfg)


def stock_loss_norm(outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    return _evaluate(stock_loss_norm_batch, LossVariant.STOCK_LOSS_NORM, outputs, delta, cfg)


LOSS_FUNCTIONS: dict[LossVariant, Callable[..., LossEvaluation]] = {
    LossVariant.STOCK_LOSS: stock_loss,
    LossVariant.STOCK_LOSS_MAX: stock_loss_max,
    LossVariant.STOCK_LOSS_L2: stock_loss_l2,
    LossVariant.STOCK_LOSS_NORM: stock_loss_norm,
}


def evaluate_loss(outputs: OutputVector, delta, cfg: LossConfig) -> LossEvaluation:
    """Dispatch on ``cfg.variant``."""
    return LOSS_FUNCTIONS[cfg.variant](outputs, delta, cfg)


def loss_gradient_fd(loss_fn, outputs: OutputVector, delta, cfg: LossConfig, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of ``loss_fn`` over every output node.

    Raises ``ValueError`` if a perturbed node would leave (-1, 1), or, for
    non-smooth losses, if it would straddle the kink at 0.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    base = outputs.as_array()
    if np.any(np.abs(base) + h >= 1.0):
        raise ValueError("finite-difference step would leave (-1, 1)")
    if not cfg.smooth and np.any((base - h < 0) & (base + h > 0)):
        raise ValueError("finite-difference step straddles the sign kink at 0; use a one-sided point")
    grad = np.empty_like(base)
    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += h
        down[k] -= h
        f_up = loss_fn(OutputVector.from_array(up, outputs.has_hold), delta, cfg).value
        f_down = loss_fn(OutputVector.from_array(down, outputs.has_hold), delta, cfg).value
        grad[k] = (f_up - f_down) / (2.0 * h)
    return grad
