"""Small forecasters trained directly on the trading losses.

Two heads over a flattened ``seq_len x n_stocks x n_features`` window:

* ``Linear``: ``O = tanh(W x + b)``
* ``MLP``:    ``O = tanh(W2 tanh(W1 x + b1) + b2)``

Gradients are written out by hand (reverse mode through the two layers),
fed by the analytic ``dL/dO`` from :mod:`stockloss.losses`.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .backtest import BacktestConfig, ledger_from_exposure
from .core import DEFAULT_EPSILON_FLOOR, AllocationDecision, LossConfig, OutputVector, allocate, allocate_many
from .data import FEATURE_INDEX, FeaturePanel, SplitBounds
from .losses import batch_loss, signal_column

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stockloss-checkpoint"
CHECKPOINT_VERSION = 1


class Architecture(str, enum.Enum):
    LINEAR = "Linear"
    MLP = "MLP"


class ShapeError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_stocks: int
    architecture: Architecture = Architecture.LINEAR
    hidden_width: int = 32
    seq_len: int = 96
    n_features: int = 8
    use_hold: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        for name in ("n_stocks", "hidden_width", "seq_len", "n_features"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_outputs(self) -> int:
        return self.n_stocks + (1 if self.use_hold else 0)

    @property
    def input_size(self) -> int:
        return self.seq_len * self.n_stocks * self.n_features

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        if self.architecture == Architecture.LINEAR:
            return (("W", (self.n_outputs, self.input_size)), ("b", (self.n_outputs,)))
        return (
            ("W1", (self.hidden_width, self.input_size)),
            ("b1", (self.hidden_width,)),
            ("W2", (self.n_outputs, self.hidden_width)),
            ("b2", (self.n_outputs,)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    n_restarts: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.n_restarts < 1:
            raise ValueError("learning_rate, batch_size and n_restarts must be positive")


@dataclass
class ModelParams:
    """Flat parameter vector plus the layout that slices it into layers."""

    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got {self.flat.shape}")

    @property
    def layout(self):
        return self.config.layout()

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.config.layout())

    def views(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = self.flat[pos : pos + n].reshape(shape)
            pos += n
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, np.zeros(sum(math.prod(s) for _, s in config.layout())))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for every weight and bias."""
    chunks = []
    for name, shape in config.layout():
        fan_in = shape[1] if len(shape) == 2 else (
            config.input_size if name in ("b", "b1") else config.hidden_width
        )
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, math.prod(shape)))
    return ModelParams(config, np.concatenate(chunks))


def _flatten_windows(params: ModelParams, windows) -> np.ndarray:
    cfg = params.config
    x = np.asarray(windows, dtype=np.float64)
    shape = (cfg.seq_len, cfg.n_stocks, cfg.n_features)
    if x.shape == shape:
        x = x[None]
    if x.shape[1:] != shape:
        raise ShapeError(f"window shape {x.shape[1:]} does not match {shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("window contains a non-finite value")
    return x.reshape(x.shape[0], -1)


# tanh rounds to exactly +-1 in double precision once |z| > ~19; outputs are
# kept strictly inside (-1, 1) by clamping to the neighbouring doubles
_OUTPUT_BOUND = float(np.nextafter(1.0, 0.0))


def forward_batch(params: ModelParams, X: np.ndarray):
    """Outputs ``(B, n_outputs)`` for flattened inputs, plus the activations backprop needs."""
    p = params.views()
    if params.config.architecture == Architecture.LINEAR:
        O = np.tanh(X @ p["W"].T + p["b"])
        cache = (X,)
    else:
        H = np.tanh(X @ p["W1"].T + p["b1"])
        O = np.tanh(H @ p["W2"].T + p["b2"])
        cache = (X, H)
    np.clip(O, -_OUTPUT_BOUND, _OUTPUT_BOUND, out=O)
    return O, cache


def backward_batch(params: ModelParams, O: np.ndarray, cache, g_O: np.ndarray) -> np.ndarray:
    """Parameter gradient given ``dL/dO`` rows; ordered like ``params.flat``."""
    g_z = g_O * (1.0 - O * O)
    if params.config.architecture == Architecture.LINEAR:
        (X,) = cache
        return np.concatenate([(g_z.T @ X).ravel(), g_z.sum(axis=0)])
    X, H = cache
    W2 = params.views()["W2"]
    g_H = (g_z @ W2) * (1.0 - H * H)
    return np.concatenate([(g_H.T @ X).ravel(), g_H.sum(axis=0), (g_z.T @ H).ravel(), g_z.sum(axis=0)])


def forward(params: ModelParams, window) -> OutputVector:
    """Map one ``seq_len x n_stocks x n_features`` window to an :class:`OutputVector`."""
    X = _flatten_windows(params, window)
    if X.shape[0] != 1:
        raise ShapeError("forward takes a single window; use forward_batch for many")
    O, _ = forward_batch(params, X)
    return OutputVector.from_array(O[0], params.config.use_hold)


def backward(params: ModelParams, window, delta, loss_cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. every parameter for one or more windows.

    Several windows (leading batch axis, with matching ``delta`` rows) give
    the batch-mean loss.
    """
    if loss_cfg.use_hold != params.config.use_hold:
        raise CompatibilityError("loss and model disagree on the hold node")
    X = _flatten_windows(params, window)
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    O, cache = forward_batch(params, X)
    value, g_O = batch_loss(O, delta, loss_cfg)
    return value, backward_batch(params, O, cache, g_O)


@dataclass(frozen=True)
class Normalizer:
    """Per-stock, per-feature standardization fitted on training rows."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self._buf = np.empty(size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``theta``."""
        self.t += 1
        b1, b2, buf = self.beta1, self.beta2, self._buf
        self.m *= b1
        self.m += (1.0 - b1) * grad
        np.multiply(grad, grad, out=buf)
        buf *= 1.0 - b2
        self.v *= b2
        self.v += buf
        # lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections folded into scalars
        c1 = 1.0 - b1**self.t
        c2 = math.sqrt(1.0 - b2**self.t)
        np.sqrt(self.v, out=buf)
        buf /= c2
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr / c1
        theta -= buf


class WindowSource:
    """Standardized lookback windows over a full panel.

    Sample ``t`` is the window of rows ``t - seq_len + 1 .. t``; its signal
    delta is ``x[t + 1] - x[t]`` of the loss's signal column.
    """

    def __init__(self, panel: FeaturePanel, normalizer: Normalizer, seq_len: int):
        self.panel = panel
        self.seq_len = seq_len
        z = normalizer.apply(panel.values)
        # (T - L + 1, N, F, L) view; sample t lives at index t - L + 1
        self._view = sliding_window_view(z, seq_len, axis=0)

    def first_sample(self) -> int:
        return self.seq_len - 1

    def inputs(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < self.seq_len - 1) or np.any(t >= self.panel.n_days):
            raise InsufficientDataError("window index lacks lookback context or lies past the panel")
        w = self._view[t - (self.seq_len - 1)]  # (B, N, F, L)
        return np.ascontiguousarray(w.transpose(0, 3, 1, 2)).reshape(t.size, -1)

    def deltas(self, t: np.ndarray, column: str) -> np.ndarray:
        x = self.panel.values[:, :, FEATURE_INDEX[column]]
        t = np.asarray(t)
        return x[t + 1] - x[t]


def predict_outputs(params: ModelParams, source: WindowSource, days: range) -> np.ndarray:
    """Raw outputs for decision days ``days.start .. days.stop - 2`` (the last day opens no trade)."""
    t = np.arange(days.start, days.stop - 1)
    if t.size == 0:
        return np.zeros((0, params.config.n_outputs))
    O, _ = forward_batch(params, source.inputs(t))
    return O


def predict_decisions(
    params: ModelParams, source: WindowSource, days: range, epsilon_floor: float = DEFAULT_EPSILON_FLOOR
) -> list[AllocationDecision]:
    O = predict_outputs(params, source, days)
    return [allocate(OutputVector.from_array(row, params.config.use_hold), epsilon_floor) for row in O]


def backtest_days(
    params: ModelParams, source: WindowSource, days: range, cfg: Optional[BacktestConfig] = None,
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR,
):
    """Backtest the model over the panel rows in ``days`` (vectorized allocation)."""
    cfg = cfg or BacktestConfig()
    O = predict_outputs(params, source, days)
    exposure, fractions, _ = allocate_many(O, params.config.use_hold, epsilon_floor)
    panel = source.panel.slice_days(days.start, days.stop)
    return ledger_from_exposure(panel, exposure, fractions.sum(axis=1), cfg)


@dataclass
class RestartRecord:
    restart: int
    seed: int
    status: str  # "ok" or "failed: <reason>"
    val_profit_pct: float


@dataclass
class TrainResult:
    best_params: ModelParams
    normalizer: Normalizer
    best_restart: int
    history: list[dict] = field(default_factory=list)
    restarts: list[RestartRecord] = field(default_factory=list)
    restart_params: list[Optional[ModelParams]] = field(default_factory=list, repr=False)


def _restart_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def train(
    panel: FeaturePanel,
    bounds: SplitBounds,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    backtest_cfg: Optional[BacktestConfig] = None,
    keep_all: bool = False,
) -> TrainResult:
    """Train ``n_restarts`` seeded models and keep the one with the best validation profit.

    ``panel`` is the full panel and ``bounds`` the train/validation/test day
    ranges into it. Training samples are the windows whose target day falls
    inside the training range; lookback context may reach back across split
    boundaries but never forward.
    """
    if panel.n_stocks != model_cfg.n_stocks or panel.values.shape[2] != model_cfg.n_features:
        raise CompatibilityError(
            f"panel has {panel.n_stocks} stocks x {panel.values.shape[2]} features, "
            f"model expects {model_cfg.n_stocks} x {model_cfg.n_features}"
        )
    if train_cfg.loss.use_hold != model_cfg.use_hold:
        raise CompatibilityError("loss and model disagree on the hold node")
    backtest_cfg = backtest_cfg or BacktestConfig()
    L = model_cfg.seq_len
    train_t = np.arange(L - 1, bounds.train.stop - 1)
    if train_t.size < 1:
        raise InsufficientDataError(f"training range of {len(bounds.train)} days is too short for seq_len={L}")
    if bounds.validation.start < L - 1 or len(bounds.validation) < 2:
        raise InsufficientDataError("validation range lacks lookback context or has fewer than two days")

    normalizer = Normalizer.fit(panel.values[bounds.train.start : bounds.train.stop])
    source = WindowSource(panel, normalizer, L)
    column = signal_column(train_cfg.loss)
    X_all = source.inputs(train_t)
    D_all = source.deltas(train_t, column)

    result = TrainResult(best_params=None, normalizer=normalizer, best_restart=-1)  # type: ignore[arg-type]
    best_profit = -math.inf
    for r, seed in enumerate(_restart_seeds(model_cfg.seed, train_cfg.n_restarts)):
        rng = np.random.default_rng(seed)
        params = init_params(model_cfg, rng)
        opt = Adam(params.size, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_epsilon)
        status = "ok"
        epoch_rows = []
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(train_t.size)
            losses = []
            for start in range(0, order.size, train_cfg.batch_size):
                idx = order[start : start + train_cfg.batch_size]
                O, cache = forward_batch(params, X_all[idx])
                value, g_O = batch_loss(O, D_all[idx], train_cfg.loss)
                grad = backward_batch(params, O, cache, g_O)
                if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                    status = f"failed: non-finite loss at epoch {epoch}"
                    break
                opt.step(params.flat, grad)
                losses.append(value)
            if status == "ok" and not np.all(np.isfinite(params.flat)):
                status = f"failed: non-finite parameters at epoch {epoch}"
            if status != "ok":
                logger.warning("restart %d aborted: %s", r, status)
                break
            val = backtest_days(params, source, bounds.validation, backtest_cfg).profit_pct
            epoch_rows.append(
                {"restart": r, "epoch": epoch, "train_loss": float(np.mean(losses)), "val_profit_pct": val}
            )
        result.history.extend(epoch_rows)
        if status != "ok":
            result.restarts.append(RestartRecord(r, seed, status, math.nan))
            result.restart_params.append(None)
            continue
        val_profit = backtest_days(params, source, bounds.validation, backtest_cfg).profit_pct
        result.restarts.append(RestartRecord(r, seed, status, val_profit))
        result.restart_params.append(params if keep_all else None)
        if val_profit > best_profit:
            best_profit = val_profit
            result.best_params = params
            result.best_restart = r
    if result.best_params is None:
        raise FloatingPointError("every restart diverged")
    return result


def save_checkpoint(path, params: ModelParams, normalizer: Normalizer, loss_cfg: Optional[LossConfig] = None) -> None:
    """JSON checkpoint; Python float repr round-trips bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "params": params.flat.tolist(),
        "normalizer": {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()},
    }
    if loss_cfg is not None:
        doc["loss"] = {
            "variant": loss_cfg.variant.value,
            "smooth": loss_cfg.smooth,
            "gamma": loss_cfg.gamma,
            "use_hold": loss_cfg.use_hold,
            "signal_source": loss_cfg.signal_source.value,
            "denom_epsilon": loss_cfg.denom_epsilon,
            "l2_direction_gate": loss_cfg.l2_direction_gate,
        }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, Normalizer]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["model_config"])
    layout = tuple((name, tuple(shape)) for name, shape in doc["layout"])
    if layout != config.layout():
        raise ValueError(f"{path}: layout does not match model config")
    params = ModelParams(config, np.array(doc["params"], dtype=np.float64))
    norm = doc["normalizer"]
    return params, Normalizer(np.array(norm["mean"]), np.array(norm["std"]))
