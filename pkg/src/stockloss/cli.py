"""Command-line entry point: ``stockloss {synth,train,backtest,gradcheck,compare}``.

Exit codes: 0 success, 1 validation failure (bad data, failed checks,
incompatible checkpoint), 2 usage error (bad flags or config).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .backtest import BacktestConfig, BacktestError, buy_and_hold, mann_whitney_u
from .config import ConfigError, ExperimentConfig, SynthSpec, load_config, parse_ini, resolve_model
from .core import LossVariant, SignalSource
from .data import PanelError, save_csv, split_bounds
from .model import (
    Architecture,
    CompatibilityError,
    InsufficientDataError,
    WindowSource,
    backtest_days,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
CONFIG_ECHO = "config.echo"
CHECKPOINT = "checkpoint"
HISTORY = "history.csv"
RESTARTS = "restarts.csv"
LEDGER = "ledger.csv"
SUMMARY = "summary.txt"

logger = logging.getLogger("stockloss")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_stocks=args.stocks,
        n_days=args.days,
        seed=args.seed,
        start_date=args.start_date,
        trend_up=args.trend_up,
        trend_down=args.trend_down,
        drift=args.drift,
        vol=args.vol,
    )
    if spec.trend_up + spec.trend_down > spec.n_stocks:
        raise UsageError("--trend-up + --trend-down exceeds --stocks")
    panel = spec.build()
    out = Path(args.out or "panel.csv")
    if out.suffix.lower() != ".csv":
        out = out / "panel.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(panel, out)
    print(f"wrote {out} ({panel.n_days} days x {panel.n_stocks} stocks)")
    return EXIT_OK


# ---------------------------------------------------------------- train


_TRAIN_OVERRIDES = {
    "data": "data.csv",
    "test_year": "split.test_year",
    "epochs": "train.epochs",
    "restarts": "train.n_restarts",
    "learning_rate": "train.learning_rate",
    "batch_size": "train.batch_size",
    "loss": "loss.variant",
    "smooth": "loss.smooth",
    "gamma": "loss.gamma",
    "signal": "loss.signal_source",
    "hold": "model.use_hold",
    "arch": "model.architecture",
    "width": "model.hidden_width",
    "seq_len": "model.seq_len",
    "seed": "experiment.seed",
    "out": "experiment.out",
    "compounding": "backtest.compounding",
    "cost_bps": "backtest.transaction_cost_bps",
}


def _overrides(args) -> dict:
    out = {}
    for attr, key in _TRAIN_OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        out[key] = str(value)
    return out


def resolve_config(args) -> ExperimentConfig:
    """Config file (if any) with command-line flags layered on top."""
    overrides = _overrides(args)
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return parse_ini("", overrides)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    panel = cfg.load_panel()
    bounds = split_bounds(panel, cfg.split)
    model_cfg = resolve_model(cfg, panel)
    out = Path(cfg.out_dir)

    result = train(panel, bounds, model_cfg, cfg.train, cfg.backtest, keep_all=True)

    source = WindowSource(panel, result.normalizer, model_cfg.seq_len)
    test_profits = [
        backtest_days(p, source, bounds.test, cfg.backtest).profit_pct if p is not None else math.nan
        for p in result.restart_params
    ]

    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_ECHO)
    _write_rows(
        out / HISTORY,
        ["restart", "epoch", "train_loss", "val_profit_pct"],
        ([h["restart"], h["epoch"], repr(h["train_loss"]), repr(h["val_profit_pct"])] for h in result.history),
    )
    _write_rows(
        out / RESTARTS,
        ["restart", "seed", "status", "val_profit_pct", "test_profit_pct"],
        ([r.restart, r.seed, r.status, repr(r.val_profit_pct), repr(tp)] for r, tp in zip(result.restarts, test_profits)),
    )
    # written last and atomically: a run that fails earlier leaves no checkpoint behind
    save_checkpoint(out / CHECKPOINT, result.best_params, result.normalizer, cfg.train.loss)
    best = result.restarts[result.best_restart]
    print(f"best restart {best.restart}: validation profit {best.val_profit_pct:.4f}%")
    print(f"wrote {out}")
    return EXIT_OK


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- backtest


def cmd_backtest(args) -> int:
    run = Path(args.run) if args.run else None
    config_path = args.config or (run / CONFIG_ECHO if run else None)
    checkpoint = Path(args.checkpoint) if args.checkpoint else (run / CHECKPOINT if run else None)
    if config_path is None or checkpoint is None:
        raise UsageError("backtest needs --run DIR, or both --config and --checkpoint")
    overrides = _overrides(args)
    overrides.pop("experiment.out", None)
    cfg = load_config(config_path, overrides)
    out = Path(args.out) if args.out else (run if run else Path(cfg.out_dir))

    params, normalizer = load_checkpoint(checkpoint)
    panel = cfg.load_panel()
    mc = params.config
    if (mc.n_stocks, mc.n_features) != (panel.n_stocks, panel.values.shape[2]):
        raise CompatibilityError(
            f"checkpoint expects {mc.n_stocks} stocks x {mc.n_features} features, "
            f"panel has {panel.n_stocks} x {panel.values.shape[2]}"
        )
    if normalizer.mean.shape != panel.values.shape[1:]:
        raise CompatibilityError("normalization statistics do not match the panel shape")
    bounds = split_bounds(panel, cfg.split)
    if bounds.test.start < mc.seq_len - 1:
        raise InsufficientDataError(f"test year lacks {mc.seq_len - 1} days of lookback context")

    source = WindowSource(panel, normalizer, mc.seq_len)
    ledger = backtest_days(params, source, bounds.test, cfg.backtest)
    other = replace(cfg.backtest, compounding=not cfg.backtest.compounding)
    alt = backtest_days(params, source, bounds.test, other).profit_pct
    bh = buy_and_hold(panel.slice_days(bounds.test.start, bounds.test.stop))

    summary = {"test_year": cfg.split.test_year, "model_profit_pct": ledger.profit_pct, "buy_and_hold_pct": bh}
    summary[("simple" if cfg.backtest.compounding else "compounded") + "_profit_pct"] = alt
    for key, value in ledger.summary().items():
        if key != "profit_pct":
            summary[key] = value

    out.mkdir(parents=True, exist_ok=True)
    ledger.to_csv(out / LEDGER)
    text = "".join(f"{k} = {v!r}\n" for k, v in summary.items())
    (out / SUMMARY).write_text(text, encoding="utf-8")
    print(f"model profit {ledger.profit_pct:.4f}% vs buy-and-hold {bh:.4f}% (test year {cfg.split.test_year})")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    failures = 0
    rows = gradcheck.gradient_suite(n_points=args.points, seed=args.seed, gamma=args.gamma)
    print(f"gradient check: {args.points} points per combination, rtol {gradcheck.GRAD_RTOL:g}")
    for row in rows:
        failures += not row.passed
        print(f"  {row.label()}  max rel err {row.max_rel_error:.3e}  {'ok' if row.passed else 'FAIL'}")

    err = gradcheck.smoothing_error(args.gamma, seed=args.seed)
    print(f"smoothing error (gamma={args.gamma:g}, |O|>=0.05): {err:.6e}")
    tight = gradcheck.smoothing_error(args.gamma, seed=args.seed, min_abs=0.85)
    ok = tight < 1e-6
    failures += not ok
    print(f"smoothing error (gamma={args.gamma:g}, |O|>=0.85): {tight:.6e}  {'ok' if ok else 'FAIL'} (< 1e-6)")

    fit = gradcheck.linearity_sweep()
    ok = fit.r_squared > 0.98 and fit.slope < 0
    failures += not ok
    print(f"linearity sweep N=50: R^2 {fit.r_squared:.6f}, slope {fit.slope:.6e}  {'ok' if ok else 'FAIL'}")

    alloc = gradcheck.allocation_invariants(seed=args.seed)
    ok = alloc.max_partition_error <= 1e-12 and alloc.scale_mismatches == 0 and alloc.symmetry_mismatches == 0
    failures += not ok
    print(
        f"allocation invariants: partition err {alloc.max_partition_error:.3e}, "
        f"scale mismatches {alloc.scale_mismatches}, symmetry mismatches {alloc.symmetry_mismatches}  "
        f"{'ok' if ok else 'FAIL'}"
    )

    if args.include_nonsmooth_at_zero:
        rng = np.random.default_rng(args.seed)
        cases = [
            ("equal deltas", [0.3, 0.5, 0.7], [0.02] * 4),
            ("random", rng.uniform(-0.9, 0.9, 5), rng.normal(0.0, 0.02, 6)),
        ]
        for name, others, delta in cases:
            w = gradcheck.discontinuity_witness(others, delta)
            ok = w.relative_gap < 0.01
            failures += not ok
            print(
                f"discontinuity at O1=0 ({name}): measured jump {w.measured:.6e}, "
                f"analytic {w.analytic:.6e}, rel gap {w.relative_gap:.2e}  {'ok' if ok else 'FAIL'}"
            )

    print("all checks passed" if failures == 0 else f"{failures} check(s) failed")
    return EXIT_OK if failures == 0 else EXIT_INVALID


# ---------------------------------------------------------------- compare


def read_profits(run_dir: Path, metric: str) -> list[float]:
    path = run_dir / RESTARTS
    if not path.is_file():
        raise FileNotFoundError(f"{path}: missing per-restart profit file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if metric not in (reader.fieldnames or []):
            raise ValueError(f"{path}: no column {metric!r}")
        values = [float(row[metric]) for row in reader]
    values = [v for v in values if math.isfinite(v)]
    if not values:
        raise ValueError(f"{path}: no finite {metric} values")
    return values


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    dirs = [Path(r) for r in args.runs]
    # a list, not a dict: naming the same directory twice is a valid self-comparison
    samples = [(str(d), read_profits(d, args.metric)) for d in dirs]
    lines = [f"{'run':<40} {'n':>3} {'mean':>10} {'median':>10}"]
    for name, vals in samples:
        lines.append(f"{name:<40} {len(vals):>3} {np.mean(vals):>10.4f} {np.median(vals):>10.4f}")
    lines.append("")
    lines.append(f"{'run a':<30} {'run b':<30} {'U':>7} {'p':>10} {'method':<10} sig@{args.alpha:g}")
    for (a, va), (b, vb) in itertools.combinations(samples, 2):
        res = mann_whitney_u(va, vb)
        flag = "yes" if res.pvalue < args.alpha else "no"
        lines.append(f"{a:<30} {b:<30} {res.statistic:>7.1f} {res.pvalue:>10.6f} {res.method:<10} {flag}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="global seed")
    p.add_argument("--out", default=default, help="output directory (synth: CSV path or directory)")
    p.add_argument("--config", default=default, help="experiment config file (INI)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="panel CSV (overrides the config's data source)")
    p.add_argument("--test-year", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--loss", choices=[v.value for v in LossVariant])
    p.add_argument("--smooth", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gamma", type=float)
    p.add_argument("--signal", choices=[s.value for s in SignalSource])
    p.add_argument("--hold", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--arch", choices=[a.value for a in Architecture])
    p.add_argument("--width", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--compounding", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cost-bps", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stockloss", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic panel CSV")
    _global_flags(p, suppress=True)
    p.add_argument("--stocks", type=int, default=10)
    p.add_argument("--days", type=int, default=1304)
    p.add_argument("--start-date", default="2019-01-01")
    p.add_argument("--trend-up", type=int, default=0, help="stocks with persistent positive drift")
    p.add_argument("--trend-down", type=int, default=0, help="stocks with persistent negative drift")
    p.add_argument("--drift", type=float, default=1e-3)
    p.add_argument("--vol", type=float, default=0.02)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _global_flags(p, suppress=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="backtest a checkpoint over the test year")
    _global_flags(p, suppress=True)
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="panel CSV (overrides the config's data source)")
    p.add_argument("--test-year", type=int)
    p.add_argument("--compounding", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cost-bps", type=float)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("gradcheck", help="run the gradient and invariant suite")
    _global_flags(p, suppress=True)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--include-nonsmooth-at-zero", action="store_true", help="also measure the jump at O=0")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="pairwise Mann-Whitney U tests between run directories")
    _global_flags(p, suppress=True)
    p.add_argument("runs", nargs="+")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--metric", default="test_profit_pct")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("synth", "gradcheck") and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"stockloss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        PanelError,
        CompatibilityError,
        InsufficientDataError,
        BacktestError,
        FloatingPointError,
        OSError,
        ValueError,
    ) as exc:
        print(f"stockloss {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
