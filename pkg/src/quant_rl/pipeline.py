"""Walk-forward training-testing-trading orchestration.

For every window the agent is fit on the train slice, candidate settings
are ranked on the test slice, and the winner trades the trade slice with
no further learning. Trade slices are stitched into one out-of-sample
equity curve, carrying capital from one window to the next.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .agents import AgentConfig, TrainedModel, get_model, run_episode, train_model
from .backtest import EquityCurve, baseline_buy_hold, cumulative_return, report, sharpe
from .errors import (
    ConfigError,
    DegenerateSeriesError,
    EmptyWindowError,
    InfeasiblePlanError,
    LeakageError,
    QuantRLError,
)
from .market_data import MarketFrame, load_ohlcv, prepare_frame, to_datetime64
from .trading_env import CostModel, TradingEnv, fit_turbulence, make_env

logger = logging.getLogger(__name__)

UNITS = {"D": None, "W": "W", "M": "M", "Q": "Q", "Y": "Y"}
SELECTION_METRICS = ("sharpe", "cumulative_return")
ENSEMBLE_ORDER = ("ppo", "a2c", "ddpg")


# --- windows ----------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """Row slices into a calendar for one train/test/trade triple (end exclusive)."""

    index: int
    train: tuple[int, int]
    test: tuple[int, int]
    trade: tuple[int, int]

    def dates(self, calendar: np.ndarray) -> dict:
        out = {}
        for name in ("train", "test", "trade"):
            a, b = getattr(self, name)
            out[name] = (calendar[a], calendar[b - 1])
        return out


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[Window, ...]
    stride: int
    granularity: str
    calendar: np.ndarray = field(repr=False, default_factory=lambda: np.array([], dtype="datetime64[ns]"))

    def __post_init__(self):
        validate_windows(self.windows, self.calendar)

    def __len__(self) -> int:
        return len(self.windows)

    def trade_rows(self) -> np.ndarray:
        return np.concatenate([np.arange(*w.trade) for w in self.windows]) if self.windows else np.array([], int)

    def describe(self) -> list[dict]:
        out = []
        for w in self.windows:
            d = w.dates(self.calendar)
            out.append({"index": w.index, **{k: [_iso(a), _iso(b)] for k, (a, b) in d.items()}})
        return out


def _iso(d) -> str:
    ts = pd.Timestamp(d)
    return ts.strftime("%Y-%m-%d") if ts == ts.normalize() else ts.isoformat()


def validate_windows(windows: Sequence[Window], calendar: np.ndarray | None = None) -> None:
    """Check train < test < trade inside each window and that trade slices tile."""
    n = len(calendar) if calendar is not None and len(calendar) else None
    for w in windows:
        for name in ("train", "test", "trade"):
            a, b = getattr(w, name)
            if not 0 <= a < b or (n is not None and b > n):
                raise EmptyWindowError(f"window {w.index}: {name} interval [{a}, {b}) is empty or out of range")
        if not (w.train[1] <= w.test[0] and w.test[1] <= w.trade[0]):
            raise LeakageError(f"window {w.index}: train/test/trade intervals overlap or are out of order")
    for prev, nxt in zip(windows, windows[1:]):
        if nxt.trade[0] < prev.trade[1]:
            raise LeakageError(f"windows {prev.index} and {nxt.index}: trade intervals overlap")
        if nxt.trade[0] > prev.trade[1]:
            raise InfeasiblePlanError(f"windows {prev.index} and {nxt.index}: gap between trade intervals")


def _period_starts(calendar: np.ndarray, unit: str) -> np.ndarray:
    """Row index at which each calendar unit begins, plus a final sentinel."""
    if unit not in UNITS:
        raise ConfigError(f"unknown window unit {unit!r}; expected one of {sorted(UNITS)}")
    n = len(calendar)
    if UNITS[unit] is None:
        return np.arange(n + 1)
    periods = pd.DatetimeIndex(calendar).to_period(UNITS[unit]).asi8
    starts = np.flatnonzero(np.r_[True, periods[1:] != periods[:-1]])
    return np.r_[starts, n]


def make_windows(dates, train_len: int, test_len: int, trade_len: int, stride: int | None = None,
                 unit: str = "D") -> WindowPlan:
    """Maximal rolling plan over a trading calendar.

    Lengths and stride count ``unit`` periods: trading dates for ``"D"``,
    otherwise calendar weeks/months/quarters/years that contain at least one
    trading date. When the stride is shorter than the trade length, each
    trade slice is cut where the next one begins so the slices still tile.
    """
    calendar = np.asarray(dates, dtype="datetime64[ns]")
    stride = trade_len if stride is None else stride
    if min(train_len, test_len, trade_len) <= 0 or stride <= 0:
        raise ConfigError("window lengths and stride must be positive")
    if stride > trade_len:
        raise InfeasiblePlanError(f"stride {stride} > trade length {trade_len} leaves untraded gaps")
    bounds = _period_starts(calendar, unit)
    n_units = len(bounds) - 1
    total = train_len + test_len + trade_len
    if total > n_units:
        raise InfeasiblePlanError(
            f"calendar has {n_units} {unit} periods, plan needs {total} (train {train_len} + test {test_len} "
            f"+ trade {trade_len})")
    offsets = list(range(0, n_units - total + 1, stride))
    windows = []
    for k, o in enumerate(offsets):
        a, b, c = o + train_len, o + train_len + test_len, o + total
        if k + 1 < len(offsets):
            c = min(c, offsets[k + 1] + train_len + test_len)
        windows.append(Window(k, (int(bounds[o]), int(bounds[a])), (int(bounds[a]), int(bounds[b])),
                              (int(bounds[b]), int(bounds[c]))))
    return WindowPlan(tuple(windows), stride, unit, calendar)


def windows_from_intervals(dates, intervals) -> WindowPlan:
    """Plan from explicit ``[train_start, train_end, test_start, test_end, trade_start, trade_end]`` rows."""
    calendar = np.asarray(dates, dtype="datetime64[ns]")
    windows = []
    for k, row in enumerate(intervals):
        if len(row) != 6:
            raise ConfigError(f"interval row {k} needs 6 dates, got {len(row)}")
        d = [to_datetime64(x) for x in row]
        slices = []
        for j, name in enumerate(("train", "test", "trade")):
            start, end = d[2 * j], d[2 * j + 1]
            if end < start:
                raise ConfigError(f"window {k}: {name} interval ends before it starts")
            a = int(np.searchsorted(calendar, start, side="left"))
            b = int(np.searchsorted(calendar, end, side="right"))
            if b <= a:
                raise EmptyWindowError(f"window {k}: {name} interval contains no trading dates")
            slices.append((a, b))
        windows.append(Window(k, *slices))
    return WindowPlan(tuple(windows), 0, "explicit", calendar)


# --- configuration ------------------------------------------------------------

def _from_dict(cls, data, what: str):
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from None


@dataclass
class DataConfig:
    path: str | None = None
    schema: dict | None = None
    tickers: list | None = None
    indicators: bool = True
    features: list | None = None


@dataclass
class EnvConfig:
    mode: str = "discrete_shares"
    initial_capital: float = 1_000_000.0
    k_max: int = 100
    cost: dict = field(default_factory=dict)
    turbulence_threshold: float | None = None
    reward_kind: str = "delta_value"
    reward_scaling: float = 1.0
    risk_free: float = 0.0
    weight_scale: float = 3.0


@dataclass
class WindowConfig:
    unit: str = "D"
    train: int = 0
    test: int = 0
    trade: int = 0
    stride: int | None = None
    intervals: list | None = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    algorithm: str = "ppo"
    agent: dict = field(default_factory=dict)
    candidates: list = field(default_factory=lambda: [{}])
    ensemble: list | None = None
    total_steps: int = 2048
    windows: WindowConfig = field(default_factory=WindowConfig)
    split: dict | None = None
    selection: str = "sharpe"
    periods_per_year: float = 252.0
    warm_start: bool = False
    output: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.selection not in SELECTION_METRICS:
            raise ConfigError(f"selection must be one of {SELECTION_METRICS}")
        if int(self.total_steps) <= 0:
            raise ConfigError("total_steps must be positive")
        if not self.candidates:
            raise ConfigError("need at least one candidate")
        for c in self.candidates:
            if not isinstance(c, dict):
                raise ConfigError("each candidate must be an object of agent settings")
        # validate every candidate eagerly so config errors surface before training
        for algo, overrides in self.candidate_specs():
            self.agent_config(algo, overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        sections = {"data": DataConfig, "env": EnvConfig, "windows": WindowConfig}
        for key, sub in sections.items():
            if key in data:
                data[key] = _from_dict(sub, data[key], key)
        return _from_dict(cls, data, "experiment config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def candidate_specs(self) -> list[tuple[str, dict]]:
        if self.ensemble:
            return [(str(a), {}) for a in self.ensemble]
        specs = []
        for c in self.candidates:
            c = dict(c)
            specs.append((str(c.pop("algorithm", self.algorithm)), c))
        return specs

    def agent_config(self, algorithm: str, overrides: dict, seed: int | None = None) -> AgentConfig:
        merged = {**self.agent, **overrides, "algorithm": algorithm}
        if seed is not None and "seed" not in overrides:
            merged["seed"] = seed
        return AgentConfig.from_dict(merged)

    def cost_model(self) -> CostModel:
        try:
            return CostModel(**self.env.cost)
        except TypeError as exc:
            raise ConfigError(f"bad cost section: {exc}") from None


def load_market(config: ExperimentConfig) -> MarketFrame:
    if not config.data.path:
        raise ConfigError("data.path is required")
    frame = load_ohlcv(config.data.path, config.data.schema)
    if config.data.tickers:
        frame = frame.select_tickers(config.data.tickers)
    frame, _ = prepare_frame(frame, indicators=config.data.indicators)
    return frame


def build_env(config: ExperimentConfig, frame: MarketFrame, fit_frame: MarketFrame | None = None,
              initial_capital: float | None = None) -> TradingEnv:
    """Env over ``frame``; a turbulence model, if configured, is fit on ``fit_frame`` only."""
    e = config.env
    turb = None
    if e.turbulence_threshold is not None:
        turb = fit_turbulence(fit_frame if fit_frame is not None else frame, e.turbulence_threshold)
    return make_env(frame, e.mode, e.initial_capital if initial_capital is None else initial_capital, e.k_max,
                    config.cost_model(), turb, e.reward_kind, reward_scaling=e.reward_scaling,
                    risk_free=e.risk_free, feature_names=config.data.features, weight_scale=e.weight_scale)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --- running ------------------------------------------------------------------

@dataclass
class CandidateResult:
    name: str
    algorithm: str
    overrides: dict
    sharpe: float | None
    cumulative_return: float
    model: TrainedModel = field(repr=False)
    test_curve: EquityCurve = field(repr=False)

    def summary(self) -> dict:
        return {"name": self.name, "algorithm": self.algorithm, "overrides": self.overrides,
                "test_sharpe": self.sharpe, "test_cumulative_return": self.cumulative_return}


@dataclass
class WindowResult:
    window: Window
    dates: dict
    candidates: list[CandidateResult]
    selected: int
    selection_metric: str
    trade_curve: EquityCurve | None = None

    @property
    def model(self) -> TrainedModel:
        return self.candidates[self.selected].model

    def summary(self) -> dict:
        out = {
            "index": self.window.index,
            **{k: [_iso(a), _iso(b)] for k, (a, b) in self.dates.items()},
            "candidates": [c.summary() for c in self.candidates],
            "selected": self.candidates[self.selected].name,
            "selection_metric": self.selection_metric,
        }
        if self.trade_curve is not None:
            v = self.trade_curve.values
            out["trade_initial_value"] = float(v[0])
            out["trade_final_value"] = float(v[-1])
        return out


@dataclass
class PipelineResult:
    windows: list[WindowResult]
    curve: EquityCurve
    plan: WindowPlan

    @property
    def selection_log(self) -> list[dict]:
        return [{"window": w.window.index, "selected": w.candidates[w.selected].name,
                 "metric": w.selection_metric} for w in self.windows]


def _annotate(exc: Exception, index: int) -> Exception:
    if isinstance(exc, QuantRLError):
        try:
            new = type(exc)(f"window {index}: {exc}")
            new.window_index = index  # type: ignore[attr-defined]
            return new
        except TypeError:
            pass
    exc.window_index = index  # type: ignore[attr-defined]
    return exc


def select_candidate(results: Sequence[CandidateResult], metric: str) -> tuple[int, str]:
    """Index of the best candidate, ties going to the earliest one.

    Sharpe is used unless it is undefined for every candidate, in which
    case the test-window cumulative return decides.
    """
    if metric == "sharpe" and any(r.sharpe is not None for r in results):
        scores = [r.sharpe if r.sharpe is not None else -np.inf for r in results]
        used = "sharpe"
    else:
        scores = [r.cumulative_return for r in results]
        used = "cumulative_return"
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best, used


def _fit_window(config: ExperimentConfig, frame: MarketFrame, plan: WindowPlan, w: Window,
                warm: TrainedModel | None = None) -> WindowResult:
    train = frame.take(np.arange(*w.train))
    test = frame.take(np.arange(*w.test))
    ppy = config.periods_per_year
    seed = derive_seed(config.seed, w.index)
    env_train = build_env(config, train)
    env_test = build_env(config, test, fit_frame=train)
    results = []
    for c, (algo, overrides) in enumerate(config.candidate_specs()):
        agent = get_model(algo, env_train, config.agent_config(algo, overrides, seed))
        if warm is not None and warm.algorithm == algo and hasattr(agent, "load_networks"):
            agent.load_networks(warm.networks, warm.extras)
        model = train_model(agent, env_train, config.total_steps)
        values = run_episode(model, env_test)
        curve = EquityCurve(test.dates, values, ppy)
        try:
            s = sharpe(curve, env_test.risk_free)
        except DegenerateSeriesError:
            s = None
        name = algo if not overrides else f"{algo}#{c}"
        results.append(CandidateResult(name, algo, overrides, s, cumulative_return(curve), model, curve))
    best, used = select_candidate(results, config.selection)
    return WindowResult(w, w.dates(plan.calendar), results, best, used)


def _trade_window(config: ExperimentConfig, frame: MarketFrame, result: WindowResult, capital: float) -> EquityCurve:
    w = result.window
    train = frame.take(np.arange(*w.train))
    trade = frame.take(np.arange(*w.trade))
    if trade.n_dates < 2:
        # a single-date slice cannot trade; it just carries the capital forward
        return EquityCurve(trade.dates, np.array([capital]), config.periods_per_year)
    env = build_env(config, trade, fit_frame=train, initial_capital=capital)
    values = run_episode(result.model, env)
    return EquityCurve(trade.dates, values, config.periods_per_year)


def plan_for(config: ExperimentConfig, frame: MarketFrame) -> WindowPlan:
    wc = config.windows
    if wc.intervals:
        return windows_from_intervals(frame.dates, wc.intervals)
    return make_windows(frame.dates, wc.train, wc.test, wc.trade, wc.stride, wc.unit)


def run_pipeline(config: ExperimentConfig, frame: MarketFrame | None = None, out_dir=None,
                 jobs: int = 1) -> PipelineResult:
    """Train, select and trade every window; returns per-window results and the stitched curve."""
    if frame is None:
        frame = load_market(config)
    plan = plan_for(config, frame)
    if not len(plan):
        raise InfeasiblePlanError("plan has no windows")

    def fit(w: Window, warm=None) -> WindowResult:
        try:
            return _fit_window(config, frame, plan, w, warm)
        except Exception as exc:
            raise _annotate(exc, w.index) from exc

    if config.warm_start or jobs <= 1:
        fitted = []
        warm = None
        for w in plan.windows:
            fitted.append(fit(w, warm if config.warm_start else None))
            warm = fitted[-1].model
    else:
        with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
            fitted = list(pool.map(fit, plan.windows))

    capital = config.env.initial_capital
    dates, values = [], []
    for res in fitted:
        try:
            curve = _trade_window(config, frame, res, capital)
        except Exception as exc:
            raise _annotate(exc, res.window.index) from exc
        res.trade_curve = curve
        capital = float(curve.values[-1])
        dates.append(curve.dates)
        values.append(curve.values)
    stitched = EquityCurve(np.concatenate(dates), np.concatenate(values), config.periods_per_year)
    result = PipelineResult(fitted, stitched, plan)
    if out_dir is not None:
        write_results(result, config, frame, out_dir)
    return result


def run_ensemble(config: ExperimentConfig, frame: MarketFrame | None = None, out_dir=None,
                 jobs: int = 1) -> PipelineResult:
    """Pipeline whose per-window candidates are PPO, A2C and DDPG (or ``config.ensemble``)."""
    algos = list(config.ensemble or ENSEMBLE_ORDER)
    config = dataclasses.replace(config, ensemble=algos)
    return run_pipeline(config, frame, out_dir, jobs)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_results(result: PipelineResult, config: ExperimentConfig, frame: MarketFrame, out_dir) -> dict:
    """Per-window model and metric files plus the stitched curve and consolidated report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for res in result.windows:
        wdir = out / f"window_{res.window.index:03d}"
        wdir.mkdir(exist_ok=True)
        res.model.save(wdir / "model.json")
        _dump(res.summary(), wdir / "metrics.json")
        res.trade_curve.to_csv(wdir / "trade_equity.csv")
    curve_path = out / "equity.csv"
    result.curve.to_csv(curve_path)
    traded = frame.take(result.plan.trade_rows())
    baselines = {"buy_and_hold": baseline_buy_hold(traded, capital=config.env.initial_capital,
                                                   periods_per_year=config.periods_per_year)}
    rep = report(result.curve, baselines, config.env.risk_free)
    rep.to_json(out / "report.json")
    (out / "report.txt").write_text(rep.to_text())
    _dump({"plan": result.plan.describe(), "selection": result.selection_log}, out / "selection.json")
    paths.update(equity=str(curve_path), report=str(out / "report.json"), selection=str(out / "selection.json"),
                 windows=[str(out / f"window_{r.window.index:03d}") for r in result.windows])
    return paths
