"""Experiment configuration: a versioned INI file, round-tripped exactly."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .backtest import BacktestConfig
from .core import LossConfig, LossVariant, SignalSource
from .data import FeaturePanel, SplitSpec, load_csv, synth_market, trend_regimes
from .model import Architecture, ModelConfig, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_stocks: int = 10
    n_days: int = 1304
    seed: int = 0
    start_date: str = "2019-01-01"
    trend_up: int = 3
    trend_down: int = 3
    drift: float = 1e-3
    vol: float = 1e-3

    def build(self) -> FeaturePanel:
        drifts, vols = trend_regimes(self.n_stocks, self.trend_up, self.trend_down, self.drift, self.vol)
        return synth_market(self.n_stocks, self.n_days, self.seed, drifts, vols, self.start_date)


@dataclass(frozen=True)
class ExperimentConfig:
    split: SplitSpec
    model: ModelConfig
    train: TrainConfig
    backtest: BacktestConfig = field(default_factory=BacktestConfig)
    csv_path: Optional[str] = None
    synth: Optional[SynthSpec] = None
    out_dir: str = "run"
    seed: int = 0

    def __post_init__(self):
        if (self.csv_path is None) == (self.synth is None):
            raise ConfigError("exactly one data source (csv path or synth spec) is required")
        if self.model.use_hold != self.train.loss.use_hold:
            raise ConfigError("model.use_hold and loss.use_hold must agree")

    def load_panel(self) -> FeaturePanel:
        if self.csv_path is not None:
            return load_csv(self.csv_path)
        return self.synth.build()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {"schema_version": str(SCHEMA_VERSION), "seed": str(self.seed), "out": self.out_dir}
        if self.csv_path is not None:
            cp["data"] = {"csv": self.csv_path}
        else:
            cp["data"] = {f"synth_{f.name}": _fmt(getattr(self.synth, f.name)) for f in fields(SynthSpec)}
        cp["split"] = {"test_year": str(self.split.test_year)}
        m = self.model
        cp["model"] = {
            "architecture": m.architecture.value,
            "hidden_width": str(m.hidden_width),
            "seq_len": str(m.seq_len),
            "use_hold": _fmt(m.use_hold),
        }
        t = self.train
        cp["train"] = {
            "epochs": str(t.epochs),
            "learning_rate": _fmt(t.learning_rate),
            "batch_size": str(t.batch_size),
            "n_restarts": str(t.n_restarts),
        }
        lc = t.loss
        cp["loss"] = {
            "variant": lc.variant.value,
            "smooth": _fmt(lc.smooth),
            "gamma": _fmt(lc.gamma),
            "signal_source": lc.signal_source.value,
            "denom_epsilon": _fmt(lc.denom_epsilon),
            "l2_direction_gate": _fmt(lc.l2_direction_gate),
        }
        b = self.backtest
        cp["backtest"] = {
            "initial_budget": _fmt(b.initial_budget),
            "compounding": _fmt(b.compounding),
            "transaction_cost_bps": _fmt(b.transaction_cost_bps),
        }
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _choice(raw: str, enum_cls, what: str):
    try:
        return enum_cls(raw)
    except ValueError:
        valid = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"invalid {what} {raw!r}; valid: {valid}") from None


def parse_ini(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Build a config from INI text; ``overrides`` maps ``section.key`` to a raw string."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = value

    def get(section, key, default=None, conv=str):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                if conv is bool:
                    return cp.getboolean(section, key)
                return conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
        if default is None:
            raise ConfigError(f"missing [{section}] {key}")
        return default

    version = get("experiment", "schema_version", SCHEMA_VERSION, int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    seed = get("experiment", "seed", 0, int)

    csv_path = cp.get("data", "csv") if cp.has_option("data", "csv") else None
    synth = None
    if csv_path is None:
        defaults = SynthSpec()
        kw = {}
        for f in fields(SynthSpec):
            conv = type(getattr(defaults, f.name))
            kw[f.name] = get("data", f"synth_{f.name}", getattr(defaults, f.name), conv)
        synth = SynthSpec(**kw)

    use_hold = get("model", "use_hold", False, bool)
    try:
        loss = LossConfig(
            variant=_choice(get("loss", "variant", LossVariant.STOCK_LOSS_L2.value), LossVariant, "loss variant"),
            smooth=get("loss", "smooth", True, bool),
            gamma=get("loss", "gamma", 10.0, float),
            use_hold=use_hold,
            signal_source=_choice(get("loss", "signal_source", SignalSource.PRICE.value), SignalSource, "signal source"),
            denom_epsilon=get("loss", "denom_epsilon", 1e-8, float),
            l2_direction_gate=get("loss", "l2_direction_gate", True, bool),
        )
        model = ModelConfig(
            n_stocks=1,  # resolved against the panel at run time
            architecture=_choice(get("model", "architecture", Architecture.MLP.value), Architecture, "architecture"),
            hidden_width=get("model", "hidden_width", 8, int),
            seq_len=get("model", "seq_len", 96, int),
            use_hold=use_hold,
            seed=seed,
        )
        train = TrainConfig(
            epochs=get("train", "epochs", 100, int),
            learning_rate=get("train", "learning_rate", 1e-3, float),
            batch_size=get("train", "batch_size", 32, int),
            n_restarts=get("train", "n_restarts", 10, int),
            loss=loss,
        )
        backtest = BacktestConfig(
            initial_budget=get("backtest", "initial_budget", 10_000.0, float),
            compounding=get("backtest", "compounding", True, bool),
            transaction_cost_bps=get("backtest", "transaction_cost_bps", 0.0, float),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        split=SplitSpec(get("split", "test_year", None, int)),
        model=model,
        train=train,
        backtest=backtest,
        csv_path=csv_path,
        synth=synth,
        out_dir=get("experiment", "out", "run"),
        seed=seed,
    )


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_ini(text, overrides)


def resolve_model(cfg: ExperimentConfig, panel: FeaturePanel) -> ModelConfig:
    return replace(cfg.model, n_stocks=panel.n_stocks, n_features=panel.values.shape[2], seed=cfg.seed)
