"""Command-line entry point: ``quant-rl {ingest,train,pipeline,backtest}``.

Exit codes: 0 success, 2 user or configuration error, 3 numeric or
runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agents import ALGORITHMS, get_model, run_episode, train_model
from .backtest import (
    EquityCurve,
    baseline_buy_hold,
    baseline_equal_weight,
    baseline_min_variance,
    report,
)
from .errors import ConfigError, InsufficientHistoryError, NumericError, QuantRLError, UnsupportedAlgorithmError
from .market_data import load_ohlcv, prepare_frame, save_frame, split, to_datetime64
from .pipeline import ExperimentConfig, build_env, load_market, run_ensemble, run_pipeline

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "QUANT_RL_SEED"
BASELINES = ("buyhold", "equal", "minvar")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USER):
        super().__init__(message)
        self.code = code


# --- manifest -------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str | None
    seed: int | None
    artifacts: dict = field(default_factory=dict)
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    resolved_config_hash: str | None = None
    overrides: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        _atomic_write(path, (json.dumps(vars(self), indent=2, sort_keys=True) + "\n").encode())
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --- config handling ----------------------------------------------------------

def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    for text in overrides or ():
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = node[k] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {k!r} is not an object")
            node = nxt
        node[keys[-1]] = value
    return data


def resolve_seed(data: dict, cli_seed: int | None) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return seed


def load_config(args) -> tuple[ExperimentConfig, bytes, dict]:
    """Read the JSON config, apply ``--set`` overrides and the seed precedence."""
    path = Path(args.config)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    data = apply_overrides(data, args.set)
    data["seed"] = resolve_seed(data, getattr(args, "seed", None))
    if isinstance(data.get("data"), dict) and data["data"].get("path"):
        p = Path(data["data"]["path"])
        if not p.is_absolute():
            data["data"]["path"] = str((path.parent / p).resolve())
    return ExperimentConfig.from_dict(data), raw, data


def _prepare_out(args, config: ExperimentConfig | None = None) -> Path:
    out = args.out or (config.output if config else None)
    if not out:
        raise ConfigError("an output directory is required (--out DIR)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _store_config(out: Path, raw: bytes, resolved: dict) -> tuple[str, str]:
    resolved_bytes = (json.dumps(resolved, indent=2, sort_keys=True) + "\n").encode()
    _atomic_write(out / "config.json", raw)
    _atomic_write(out / "resolved_config.json", resolved_bytes)
    return sha256_bytes(raw), sha256_bytes(resolved_bytes)


# --- commands -------------------------------------------------------------------

def _parse_schema(items) -> dict | None:
    if not items:
        return None
    schema = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"schema mapping {item!r} is not canonical=column")
        k, v = item.split("=", 1)
        schema[k] = v
    return schema


def cmd_ingest(args) -> int:
    started = _now()
    out = _prepare_out(args)
    frame = load_ohlcv(args.input, _parse_schema(args.schema))
    if args.tickers:
        frame = frame.select_tickers([t.strip() for t in args.tickers.split(",") if t.strip()])
    clean, rep = prepare_frame(frame, indicators=not args.no_indicators)
    path = out / "frame.csv"
    save_frame(clean, path)
    summary = {
        "tickers": list(clean.tickers),
        "start": str(np.datetime_as_string(clean.dates[0], unit="D")),
        "end": str(np.datetime_as_string(clean.dates[-1], unit="D")),
        "n_dates": clean.n_dates,
        "dropped_tickers": rep.dropped_tickers,
        "filled_cells": rep.filled_cells,
        "features": sorted(clean.features),
    }
    _atomic_write(out / "summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    fills = sum(rep.filled_cells.values())
    print(f"ingested {len(clean.tickers)} tickers ({', '.join(clean.tickers)}) from {summary['start']} to "
          f"{summary['end']}: {clean.n_dates} dates, {fills} cells filled, "
          f"{len(rep.dropped_tickers)} tickers dropped")
    RunManifest("ingest", sha256_bytes(Path(args.input).read_bytes()), None,
                {"frame": str(path), "summary": str(out / "summary.json")}, started_at=started,
                finished_at=_now()).write(out)
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    config, raw, resolved = load_config(args)
    algo = args.algo or config.algorithm
    if algo not in ALGORITHMS:
        raise UnsupportedAlgorithmError(f"unknown algorithm {algo!r}; supported: {', '.join(ALGORITHMS)}")
    out = _prepare_out(args, config)
    steps = args.steps or config.total_steps
    stage = "loading data"
    try:
        frame = load_market(config)
        test = None
        if config.split:
            parts = config.split
            if "train" not in parts:
                raise ConfigError("split needs a train interval")
            train = frame.slice_dates(*parts["train"])
            if "test" in parts:
                s = split(frame, parts["train"], parts["test"], parts.get("trade", _after(frame, parts["test"])))
                train, test = s.train, s.test
        else:
            train = frame
        stage = "building the environment"
        env = build_env(config, train)
        stage = f"training {algo}"
        agent = get_model(algo, env, config.agent_config(algo, {}, config.seed))
        model = train_model(agent, env, steps)
        diagnostics = {"algorithm": algo, "total_steps": steps, "training": model.diagnostics}
        artifacts = {"model": str(out / "model.json"), "diagnostics": str(out / "diagnostics.json")}
        if test is not None and test.n_dates >= 2:
            stage = "evaluating on the test split"
            values = run_episode(model, build_env(config, test, fit_frame=train))
            curve = EquityCurve(test.dates, values, config.periods_per_year)
            curve.to_csv(out / "test_equity.csv")
            diagnostics["test_report"] = report(curve, {}, config.env.risk_free).to_dict()
            artifacts["test_equity"] = str(out / "test_equity.csv")
    except NumericError as exc:
        raise CliError(f"numeric failure while {stage}: {exc}", EXIT_RUNTIME) from exc
    model.save(out / "model.json")
    _atomic_write(out / "diagnostics.json", (json.dumps(diagnostics, indent=2, sort_keys=True) + "\n").encode())
    h, rh = _store_config(out, raw, resolved)
    RunManifest("train", h, config.seed, artifacts, started_at=started, finished_at=_now(),
                resolved_config_hash=rh, overrides=list(args.set or [])).write(out)
    print(f"trained {algo} for {steps} steps; model written to {out / 'model.json'}")
    return EXIT_OK


def _after(frame, interval):
    # a trade range strictly after the test interval, used only to satisfy split()
    end = to_datetime64(interval[1])
    later = frame.dates[frame.dates > end]
    if len(later) == 0:
        return (end + np.timedelta64(1, "D"), end + np.timedelta64(2, "D"))
    return (later[0], later[-1])


def cmd_pipeline(args) -> int:
    started = _now()
    config, raw, resolved = load_config(args)
    if args.ensemble:
        algos = [a.strip() for a in args.ensemble.split(",") if a.strip()]
        bad = [a for a in algos if a not in ALGORITHMS]
        if bad:
            raise UnsupportedAlgorithmError(f"unknown algorithm(s) {bad}; supported: {', '.join(ALGORITHMS)}")
        config = ExperimentConfig.from_dict({**resolved, "ensemble": algos})
    out = _prepare_out(args, config)
    h, rh = _store_config(out, raw, resolved)
    frame = load_market(config)
    runner = run_ensemble if config.ensemble else run_pipeline
    try:
        result = runner(config, frame, out_dir=out, jobs=args.jobs)
    except NumericError as exc:
        idx = getattr(exc, "window_index", "?")
        raise CliError(f"numeric failure in window {idx}: {exc}", EXIT_RUNTIME) from exc
    artifacts = {"equity": str(out / "equity.csv"), "report": str(out / "report.json"),
                 "selection": str(out / "selection.json"),
                 "windows": [str(out / f"window_{w.window.index:03d}") for w in result.windows]}
    RunManifest("pipeline", h, config.seed, artifacts, started_at=started, finished_at=_now(),
                resolved_config_hash=rh, overrides=list(args.set or [])).write(out)
    for entry in result.selection_log:
        print(f"window {entry['window']}: selected {entry['selected']} by {entry['metric']}")
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_backtest(args) -> int:
    started = _now()
    out = _prepare_out(args)
    ppy = args.periods_per_year
    curve = EquityCurve.from_csv(args.curve, ppy)
    baselines = {}
    wanted = [b.strip() for b in (args.baselines or "").split(",") if b.strip()]
    bad = [b for b in wanted if b not in BASELINES]
    if bad:
        raise ConfigError(f"unknown baseline(s) {bad}; choose from {', '.join(BASELINES)}")
    if wanted:
        if not args.frame:
            raise ConfigError("baselines need a market frame (--frame PATH)")
        frame, _ = prepare_frame(load_ohlcv(args.frame), indicators=False)
        start, end = curve.dates[0], curve.dates[-1]
        span = frame.slice_dates(start, end)
        if span.n_dates == 0:
            raise ConfigError("market frame has no dates inside the curve's range")
        capital = float(curve.values[0])
        if "buyhold" in wanted:
            baselines["buy_and_hold"] = baseline_buy_hold(span, capital=capital, periods_per_year=ppy)
        if "equal" in wanted:
            baselines["equal_weight"] = baseline_equal_weight(span, capital=capital, periods_per_year=ppy)
        if "minvar" in wanted:
            history = frame.take(np.flatnonzero(frame.dates < start))
            available = max(history.n_dates - 1, 0)
            lookback = args.lookback if args.lookback else min(60, available)
            if lookback < span.n_tickers + 2:
                raise InsufficientHistoryError(
                    f"min-variance baseline needs at least {span.n_tickers + 2} returns before {_day(start)}, "
                    f"frame has {available}")
            # only the closes needed for the first estimate are passed as history
            baselines["min_variance"] = baseline_min_variance(
                span, capital, lookback=lookback, rebalance=args.rebalance,
                history=history.take(np.arange(history.n_dates - lookback - 1, history.n_dates))
                if history.n_dates > lookback else history,
                periods_per_year=ppy)
    rep = report(curve, baselines, args.risk_free)
    rep.to_json(out / "report.json")
    text = rep.to_text()
    (out / "report.txt").write_text(text)
    print(text, end="")
    for name, row in rep.rows.items():
        if row.degenerate:
            print(f"note: {name}: {', '.join(row.degenerate)} undefined (degenerate series)")
    RunManifest("backtest", sha256_bytes(Path(args.curve).read_bytes()), None,
                {"report": str(out / "report.json"), "text": str(out / "report.txt")},
                started_at=started, finished_at=_now()).write(out)
    return EXIT_OK


def _day(d) -> str:
    return str(np.datetime_as_string(np.datetime64(d, "D")))


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quant-rl", description="Deep RL trading engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="clean an OHLCV CSV and attach indicators")
    p.add_argument("input", help="long-format OHLCV CSV")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--schema", action="append", metavar="CANON=COLUMN", help="column mapping, repeatable")
    p.add_argument("--tickers", help="comma-separated subset of tickers")
    p.add_argument("--no-indicators", action="store_true", help="skip MACD/RSI")
    p.set_defaults(func=cmd_ingest)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (dotted key)")
        p.add_argument("--seed", type=int, help=f"master seed (beats {SEED_ENV} and the config)")
        p.add_argument("--out", help="run directory (defaults to the config's output)")

    p = sub.add_parser("train", help="train one agent on the configured split")
    common(p)
    p.add_argument("--algo", help=f"algorithm ({', '.join(ALGORITHMS)})")
    p.add_argument("--steps", type=int, help="environment steps (defaults to total_steps)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pipeline", help="walk-forward train/test/trade run")
    common(p)
    p.add_argument("--ensemble", help="comma-separated candidate algorithms, e.g. ppo,a2c,ddpg")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for window fitting")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("backtest", help="metrics report for an equity curve")
    p.add_argument("--curve", required=True, help="CSV with date,value columns")
    p.add_argument("--frame", help="OHLCV CSV for baselines")
    p.add_argument("--baselines", help=f"comma-separated subset of {','.join(BASELINES)}")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--risk-free", type=float, default=0.0, help="per-period risk-free rate")
    p.add_argument("--periods-per-year", type=float, default=252.0)
    p.add_argument("--lookback", type=int, help="min-variance estimation window (returns)")
    p.add_argument("--rebalance", type=int, default=20, help="min-variance rebalance period (dates)")
    p.set_defaults(func=cmd_backtest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (QuantRLError, OSError) as exc:
        if isinstance(exc, QuantRLError) and not isinstance(exc, ValueError):
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
