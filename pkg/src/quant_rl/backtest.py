"""Performance metrics and baseline strategies for equity curves.

Baselines are frictionless reference portfolios that may hold fractional
shares. They are benchmarks, not executable strategies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateSeriesError, DomainError, EmptyInputError, InsufficientHistoryError, ParseError, ShapeError
from .market_data import MarketFrame

PERIODS_PER_YEAR = {"daily": 252, "weekly": 52, "monthly": 12, "5min": 105120}
METRICS = ("final_value", "cumulative_return", "annualized_return", "annualized_std", "sharpe", "max_drawdown")


def periods_per_year(value) -> float:
    if isinstance(value, str):
        if value not in PERIODS_PER_YEAR:
            raise DomainError(f"unknown granularity {value!r}; expected one of {sorted(PERIODS_PER_YEAR)}")
        return float(PERIODS_PER_YEAR[value])
    value = float(value)
    if not value > 0:
        raise DomainError("periods_per_year must be positive")
    return value


@dataclass(frozen=True)
class EquityCurve:
    dates: np.ndarray
    values: np.ndarray
    periods_per_year: float = 252.0

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[ns]")
        values = np.asarray(self.values, dtype=float)
        if dates.shape != values.shape or values.ndim != 1:
            raise ShapeError("dates and values must be 1-D and of equal length")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DomainError("equity values must be finite and strictly positive")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DomainError("equity curve dates must be strictly increasing")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "periods_per_year", periods_per_year(self.periods_per_year))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0

    def between(self, start, end) -> "EquityCurve":
        mask = (self.dates >= start) & (self.dates <= end)
        return EquityCurve(self.dates[mask], self.values[mask], self.periods_per_year)

    def to_csv(self, path) -> None:
        ts = pd.DatetimeIndex(self.dates)
        fmt = "%Y-%m-%d" if (ts == ts.normalize()).all() else "%Y-%m-%dT%H:%M:%S"
        pd.DataFrame({"date": ts.strftime(fmt), "value": self.values}).to_csv(
            path, index=False, float_format="%.17g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path, periods_per_year=252.0) -> "EquityCurve":
        try:
            table = pd.read_csv(path, float_precision="round_trip")
        except pd.errors.EmptyDataError:
            raise EmptyInputError(f"{path} is empty") from None
        if not {"date", "value"} <= set(table.columns):
            raise ParseError(f"{path}: expected columns date,value")
        dates = pd.to_datetime(table["date"], format="ISO8601", errors="coerce")
        values = pd.to_numeric(table["value"], errors="coerce")
        bad = dates.isna() | values.isna()
        if bad.any():
            raise ParseError(f"{path}: malformed row at line {int(np.flatnonzero(bad.to_numpy())[0]) + 2}")
        return cls(dates.to_numpy(), values.to_numpy(dtype=float), periods_per_year)


def _values(curve) -> np.ndarray:
    return curve.values if isinstance(curve, EquityCurve) else np.asarray(curve, dtype=float)


def _ppy(curve, default: float = 252.0) -> float:
    return curve.periods_per_year if isinstance(curve, EquityCurve) else default


def cumulative_return(curve) -> float:
    v = _values(curve)
    if len(v) < 1:
        raise EmptyInputError("empty curve")
    return float((v[-1] - v[0]) / v[0])


def annualized_return(curve) -> float:
    """Geometric annual growth: (v_T/v_0)^(ppy/(N-1)) - 1."""
    v = _values(curve)
    if len(v) < 2:
        raise DegenerateSeriesError("annualized return needs at least 2 points")
    with np.errstate(over="ignore"):
        out = float(np.float64(v[-1] / v[0]) ** (_ppy(curve) / (len(v) - 1)) - 1.0)
    if not math.isfinite(out):
        raise DegenerateSeriesError("annualized return overflows for this curve")
    return out


def annualized_std(curve) -> float:
    v = _values(curve)
    if len(v) < 3:
        raise DegenerateSeriesError("annualized std needs at least 3 points")
    r = v[1:] / v[:-1] - 1.0
    return float(r.std(ddof=1) * math.sqrt(_ppy(curve)))


def max_drawdown(curve) -> float:
    """Worst fractional fall from a running peak; always <= 0."""
    v = _values(curve)
    if len(v) < 1:
        raise EmptyInputError("empty curve")
    peak = np.maximum.accumulate(v)
    return float(min(((v - peak) / peak).min(), 0.0))


def sharpe(curve, risk_free: float = 0.0) -> float:
    """Annualized Sharpe ratio of simple per-period returns.

    ``risk_free`` is a per-period rate. Raises DegenerateSeriesError when the
    returns have zero variance.
    """
    v = _values(curve)
    if len(v) < 3:
        raise DegenerateSeriesError("Sharpe needs at least 3 points")
    r = v[1:] / v[:-1] - 1.0
    sd = r.std(ddof=1)
    # returns that differ only by rounding noise count as constant
    if not sd > 1e-12 * abs(r.mean()):
        raise DegenerateSeriesError("Sharpe undefined for zero-variance returns")
    return float((r.mean() - risk_free) / sd * math.sqrt(_ppy(curve)))


# --- baselines ---------------------------------------------------------------

def _check_simplex(w: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ShapeError(f"weights have shape {w.shape}, expected ({n},)")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError("weights must be non-negative and sum to 1")
    return w


def baseline_buy_hold(frame: MarketFrame, weights=None, capital: float = 1_000_000.0,
                      periods_per_year=252.0) -> EquityCurve:
    """Buy once at the first close with fractional shares and never trade again."""
    n = frame.n_tickers
    w = np.full(n, 1.0 / n) if weights is None else _check_simplex(weights, n)
    shares = w * capital / frame.close[0]
    return EquityCurve(frame.dates, frame.close @ shares, periods_per_year)


def _rebalanced_curve(close: np.ndarray, weights_at: dict[int, np.ndarray], capital: float) -> np.ndarray:
    values = np.empty(len(close))
    shares = None
    for t in range(len(close)):
        if t in weights_at:
            v = capital if shares is None else float(close[t] @ shares)
            shares = weights_at[t] * v / close[t]
        values[t] = close[t] @ shares
    return values


def baseline_equal_weight(frame: MarketFrame, capital: float = 1_000_000.0, rebalance: int | None = 1,
                          periods_per_year=252.0) -> EquityCurve:
    """Restore 1/n weights every ``rebalance`` dates (None: never after the first)."""
    n = frame.n_tickers
    if n < 1:
        raise EmptyInputError("no assets")
    w = np.full(n, 1.0 / n)
    if rebalance is None:
        points = [0]
    else:
        if int(rebalance) <= 0:
            raise DomainError("rebalance period must be positive")
        points = range(0, frame.n_dates, int(rebalance))
    values = _rebalanced_curve(frame.close, {t: w for t in points}, capital)
    return EquityCurve(frame.dates, values, periods_per_year)


def min_variance_weights(cov, long_only: bool = True, ridge: float = 1e-8) -> np.ndarray:
    """Global minimum-variance weights Sigma^-1 1 / (1' Sigma^-1 1).

    With ``long_only`` negative weights are clipped to zero and the rest
    renormalized. The ridge is relative to the mean variance so the result
    does not depend on the units of the returns.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ShapeError("covariance must be square")
    ones = np.ones(n)
    scale = float(np.trace(cov)) / n
    x = np.linalg.solve(cov + ridge * (scale if scale > 0 else 1.0) * np.eye(n), ones)
    w = x / (ones @ x)
    if long_only:
        w = np.clip(w, 0.0, None)
        total = w.sum()
        w = w / total if total > 0 else np.full(n, 1.0 / n)
    return w


def baseline_min_variance(frame: MarketFrame, capital: float = 1_000_000.0, lookback: int = 60,
                          rebalance: int = 20, history: MarketFrame | None = None,
                          periods_per_year=252.0) -> EquityCurve:
    """Long-only minimum-variance portfolio re-estimated every ``rebalance`` dates.

    The covariance at a rebalance date uses the ``lookback`` returns ending
    at that date's close. ``history`` supplies closes preceding ``frame``
    so the first estimate has enough data.
    """
    n = frame.n_tickers
    if lookback < n + 2:
        raise InsufficientHistoryError(f"lookback {lookback} is below n + 2 = {n + 2}")
    if int(rebalance) <= 0:
        raise DomainError("rebalance period must be positive")
    if history is not None:
        if history.tickers != frame.tickers:
            raise ShapeError("history and frame tickers differ")
        if history.n_dates and history.dates[-1] >= frame.dates[0]:
            raise DomainError("history must end before the frame starts")
        closes = np.vstack([history.close, frame.close])
        offset = history.n_dates
    else:
        closes = frame.close
        offset = 0
    if offset < lookback:
        raise InsufficientHistoryError(
            f"min-variance needs {lookback} returns before the first date, have {offset}")
    returns = closes[1:] / closes[:-1] - 1.0
    weights_at = {}
    for t in range(0, frame.n_dates, int(rebalance)):
        g = offset + t  # index into closes; returns[g-1] ends at this close
        window = returns[g - lookback:g]
        cov = np.atleast_2d(np.cov(window, rowvar=False, ddof=1))
        weights_at[t] = min_variance_weights(cov)
    values = _rebalanced_curve(frame.close, weights_at, capital)
    return EquityCurve(frame.dates, values, periods_per_year)


# --- report -----------------------------------------------------------------

@dataclass
class MetricRow:
    initial_value: float
    final_value: float
    cumulative_return: float | None
    annualized_return: float | None
    annualized_std: float | None
    sharpe: float | None
    max_drawdown: float | None
    degenerate: list[str] = field(default_factory=list)


def metric_row(curve: EquityCurve, risk_free: float = 0.0) -> MetricRow:
    if len(curve) == 0:
        raise EmptyInputError("empty equity curve")
    row = MetricRow(float(curve.values[0]), float(curve.values[-1]), cumulative_return(curve),
                    None, None, None, max_drawdown(curve))
    for name, fn in (("annualized_return", annualized_return), ("annualized_std", annualized_std),
                     ("sharpe", lambda c: sharpe(c, risk_free))):
        try:
            setattr(row, name, fn(curve))
        except DegenerateSeriesError:
            row.degenerate.append(name)
    return row


@dataclass
class BacktestReport:
    rows: dict[str, MetricRow]
    start: str
    end: str
    risk_free: float = 0.0

    @property
    def strategy(self) -> MetricRow:
        return self.rows["strategy"]

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "risk_free": self.risk_free,
            "rows": {name: vars(row) for name, row in self.rows.items()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_text(self) -> str:
        labels = [
            ("Initial value", "initial_value", "money"),
            ("Final value", "final_value", "money"),
            ("Cumulative return", "cumulative_return", "pct"),
            ("Annualized return", "annualized_return", "pct"),
            ("Annualized Std", "annualized_std", "pct"),
            ("Sharpe ratio", "sharpe", "num"),
            ("Max drawdown", "max_drawdown", "pct"),
        ]
        names = list(self.rows)

        def fmt(value, kind):
            if value is None:
                return "degenerate"
            if kind == "money":
                return f"{value:,.2f}"
            if kind == "pct":
                return f"{100 * value:.2f}%"
            return f"{value:.2f}"

        table = [[f"{self.start} - {self.end}"] + names]
        for label, attr, kind in labels:
            table.append([label] + [fmt(getattr(self.rows[n], attr), kind) for n in names])
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        lines = []
        for k, r in enumerate(table):
            lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)))
            if k == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def report(curve: EquityCurve, baselines: Mapping[str, EquityCurve] | Sequence[EquityCurve] = (),
           risk_free: float = 0.0) -> BacktestReport:
    """Metric suite for ``curve`` and each baseline truncated to its date range."""
    if len(curve) == 0:
        raise EmptyInputError("empty equity curve")
    if not isinstance(baselines, Mapping):
        baselines = {f"baseline_{i}": b for i, b in enumerate(baselines)}
    start, end = curve.dates[0], curve.dates[-1]
    rows = {"strategy": metric_row(curve, risk_free)}
    for name, base in baselines.items():
        cut = base.between(start, end)
        if len(cut) == 0:
            raise EmptyInputError(f"baseline {name!r} has no dates inside the curve's range")
        rows[name] = metric_row(cut, risk_free)

    def iso(d):
        return str(pd.Timestamp(d).date()) if pd.Timestamp(d) == pd.Timestamp(d).normalize() else pd.Timestamp(d).isoformat()

    return BacktestReport(rows, iso(start), iso(end), risk_free)
