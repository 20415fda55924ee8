"""Portfolio-allocation trading losses, a small forecaster trained on them, and a daily backtest."""

from .backtest import BacktestConfig, BacktestLedger, buy_and_hold, mann_whitney_u, run_backtest
from .core import (
    AllocationDecision,
    Direction,
    LossConfig,
    LossEvaluation,
    LossVariant,
    OutputVector,
    SignalSource,
    allocate,
    sign_proxy,
)
from .data import FeaturePanel, SplitSpec, load_csv, save_csv, split, synth_market
from .losses import evaluate_loss, loss_gradient_fd, stock_loss, stock_loss_l2, stock_loss_max, stock_loss_norm
from .model import Architecture, ModelConfig, TrainConfig, backward, forward, train

__version__ = "0.1.0"

__all__ = [
    "AllocationDecision",
    "Architecture",
    "BacktestConfig",
    "BacktestLedger",
    "Direction",
    "FeaturePanel",
    "LossConfig",
    "LossEvaluation",
    "LossVariant",
    "ModelConfig",
    "OutputVector",
    "SignalSource",
    "SplitSpec",
    "TrainConfig",
    "allocate",
    "backward",
    "buy_and_hold",
    "evaluate_loss",
    "forward",
    "load_csv",
    "loss_gradient_fd",
    "mann_whitney_u",
    "run_backtest",
    "save_csv",
    "sign_proxy",
    "split",
    "stock_loss",
    "stock_loss_l2",
    "stock_loss_max",
    "stock_loss_norm",
    "synth_market",
    "train",
]
