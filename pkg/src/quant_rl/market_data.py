"""OHLCV ingestion, cleaning, indicators and chronological splitting.

A :class:`MarketFrame` is a rectangular date x ticker panel. Raw frames
loaded from disk may contain missing cells (NaN); :func:`fill_missing`
turns them into a complete panel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateError,
    EmptyInputError,
    EmptyWindowError,
    InsufficientHistoryError,
    LeakageError,
    ParseError,
    SchemaError,
    ShapeError,
)

logger = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close")
REQUIRED_COLUMNS = ("date", "tic", "open", "high", "low", "close", "volume")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MarketFrame:
    dates: np.ndarray
    tickers: tuple[str, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    features: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[ns]").copy()
        dates.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "tickers", tuple(str(t) for t in self.tickers))
        shape = (len(dates), len(self.tickers))
        for name in PRICE_FIELDS + ("volume",):
            arr = _readonly(getattr(self, name))
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        feats = {}
        for name, arr in self.features.items():
            arr = _readonly(arr)
            if arr.shape != shape:
                raise ShapeError(f"feature {name!r} has shape {arr.shape}, expected {shape}")
            feats[str(name)] = arr
        object.__setattr__(self, "features", feats)

        if len(set(self.tickers)) != len(self.tickers):
            raise DuplicateError("duplicate tickers in frame")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DuplicateError("dates must be strictly increasing")
        for name in PRICE_FIELDS:
            arr = getattr(self, name)
            bad = np.isfinite(arr) & (arr <= 0)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise ParseError(f"non-positive {name} price for {self.tickers[j]} on {dates[i]}")
        if (np.isfinite(self.volume) & (self.volume < 0)).any():
            raise ParseError("negative volume")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    def is_rectangular(self) -> bool:
        arrays = [getattr(self, f) for f in PRICE_FIELDS + ("volume",)]
        return all(np.isfinite(a).all() for a in arrays)

    def slice_dates(self, start=None, end=None) -> "MarketFrame":
        """Rows with ``start <= date <= end`` (either bound may be None)."""
        mask = np.ones(self.n_dates, dtype=bool)
        if start is not None:
            mask &= self.dates >= to_datetime64(start)
        if end is not None:
            mask &= self.dates <= to_datetime64(end)
        return self.take(np.flatnonzero(mask))

    def take(self, rows) -> "MarketFrame":
        rows = np.asarray(rows, dtype=int)
        return MarketFrame(
            dates=self.dates[rows],
            tickers=self.tickers,
            open=self.open[rows],
            high=self.high[rows],
            low=self.low[rows],
            close=self.close[rows],
            volume=self.volume[rows],
            features={k: v[rows] for k, v in self.features.items()},
        )

    def select_tickers(self, tickers: Sequence[str]) -> "MarketFrame":
        idx = [self.tickers.index(t) for t in tickers]
        return MarketFrame(
            dates=self.dates,
            tickers=tuple(tickers),
            open=self.open[:, idx],
            high=self.high[:, idx],
            low=self.low[:, idx],
            close=self.close[:, idx],
            volume=self.volume[:, idx],
            features={k: v[:, idx] for k, v in self.features.items()},
        )

    def with_features(self, **features: np.ndarray) -> "MarketFrame":
        merged = dict(self.features)
        merged.update(features)
        return MarketFrame(self.dates, self.tickers, self.open, self.high, self.low,
                           self.close, self.volume, merged)

    def returns(self) -> np.ndarray:
        """Simple close-to-close returns, shape (n_dates - 1, n_tickers)."""
        return self.close[1:] / self.close[:-1] - 1.0

    def to_long(self) -> pd.DataFrame:
        """Long-format table with one row per (date, ticker)."""
        n, m = self.n_dates, self.n_tickers
        data = {
            "date": np.repeat(self.dates, m),
            "tic": np.tile(np.array(self.tickers, dtype=object), n),
        }
        for name in PRICE_FIELDS + ("volume",):
            data[name] = getattr(self, name).reshape(-1)
        for name in sorted(self.features):
            data[name] = self.features[name].reshape(-1)
        return pd.DataFrame(data)


def frame_from_close(close, tickers: Sequence[str] | None = None, start="2020-01-01", freq: str = "B",
                     volume: float = 1_000_000.0) -> MarketFrame:
    """Synthetic frame whose open/high/low all equal the close path."""
    close = np.asarray(close, dtype=float)
    if close.ndim == 1:
        close = close[:, None]
    if tickers is None:
        tickers = [f"T{i}" for i in range(close.shape[1])]
    dates = pd.date_range(start, periods=close.shape[0], freq=freq).to_numpy()
    return MarketFrame(dates, tuple(tickers), close, close, close, close, np.full(close.shape, float(volume)))


@dataclass(frozen=True)
class DataSplit:
    train: MarketFrame
    test: MarketFrame
    trade: MarketFrame

    def __post_init__(self):
        frames = (self.train, self.test, self.trade)
        if any(f.n_dates == 0 for f in frames):
            raise EmptyWindowError("every split frame needs at least one date")
        if not (self.train.tickers == self.test.tickers == self.trade.tickers):
            raise ShapeError("split frames must share the ticker set")
        if not (self.train.dates[-1] < self.test.dates[0] <= self.test.dates[-1] < self.trade.dates[0]):
            raise LeakageError("train < test < trade ordering violated")


@dataclass
class FillReport:
    dropped_tickers: list[str]
    filled_cells: dict[str, int]
    observed_counts: dict[str, int]


def to_datetime64(value) -> np.datetime64:
    return np.datetime64(pd.Timestamp(value).to_datetime64(), "ns")


def _resolve_schema(schema: Mapping[str, str] | None) -> dict[str, str]:
    resolved = {c: c for c in REQUIRED_COLUMNS}
    for key, src in (schema or {}).items():
        key = "tic" if key == "ticker" else key
        if key not in resolved:
            raise SchemaError(f"unknown canonical column {key!r} in schema mapping")
        resolved[key] = src
    return resolved


def _csv_line(pos: int) -> int:
    # header is line 1, first data row is line 2
    return int(pos) + 2


def load_ohlcv(path, schema: Mapping[str, str] | None = None) -> MarketFrame:
    """Read a long-format OHLCV CSV into a (possibly gappy) panel.

    ``schema`` maps canonical names (date, tic, open, high, low, close,
    volume) to the column names used in the file. Numeric columns not
    covered by the mapping become feature matrices.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path} is empty") from None
    raw.columns = [c.strip() for c in raw.columns]
    cols = _resolve_schema(schema)
    missing = [canon for canon, src in cols.items() if src not in raw.columns]
    if missing:
        names = ", ".join(f"{m!r} (column {cols[m]!r})" for m in missing)
        raise SchemaError(f"missing required column(s): {names}")
    if len(raw) == 0:
        raise EmptyInputError(f"{path} has a header but no rows")

    table = pd.DataFrame({"tic": raw[cols["tic"]].str.strip()})
    date_text = raw[cols["date"]].str.strip()
    table["date"] = pd.to_datetime(date_text, format="ISO8601", errors="coerce")
    bad = table["date"].isna()
    if bad.any():
        pos = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"unparseable date {date_text.iloc[pos]!r} at line {_csv_line(pos)}")
    if (table["tic"] == "").any():
        pos = int(np.flatnonzero((table["tic"] == "").to_numpy())[0])
        raise ParseError(f"empty ticker at line {_csv_line(pos)}")

    def numeric(src: str, label: str) -> pd.Series:
        text = raw[src].str.strip()
        values = _exact_floats(text)
        bad = values.isna() & (text != "")
        if bad.any():
            pos = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"unparseable {label} value {text.iloc[pos]!r} at line {_csv_line(pos)}")
        return values.astype(float)

    for name in PRICE_FIELDS + ("volume",):
        table[name] = numeric(cols[name], name)

    mapped = set(cols.values())
    extra = []
    for col in raw.columns:
        if col in mapped:
            continue
        text = raw[col].str.strip()
        parsed = _exact_floats(text)
        if parsed.isna()[text != ""].all():
            logger.warning("skipping non-numeric column %r", col)
            continue
        table[col] = numeric(col, col)
        extra.append(col)

    dup = table.duplicated(subset=["date", "tic"], keep="first")
    if dup.any():
        pos = int(np.flatnonzero(dup.to_numpy())[0])
        row = table.iloc[pos]
        raise DuplicateError(
            f"duplicate (date, ticker) row at line {_csv_line(pos)}: "
            f"{row['date'].isoformat()} {row['tic']}"
        )

    dates = np.sort(table["date"].unique())
    tickers = sorted(table["tic"].unique())
    d_idx = np.searchsorted(dates, table["date"].to_numpy())
    t_idx = np.searchsorted(np.array(tickers, dtype=object), table["tic"].to_numpy())
    shape = (len(dates), len(tickers))

    def panel(col: str) -> np.ndarray:
        out = np.full(shape, np.nan)
        out[d_idx, t_idx] = table[col].to_numpy()
        return out

    return MarketFrame(
        dates=dates,
        tickers=tickers,
        open=panel("open"),
        high=panel("high"),
        low=panel("low"),
        close=panel("close"),
        volume=panel("volume"),
        features={c: panel(c) for c in extra},
    )


def _to_float(text: str) -> float:
    try:
        return float(text) if text else np.nan
    except ValueError:
        return np.nan


def _exact_floats(text: pd.Series) -> pd.Series:
    # python's float() rounds correctly, so %.17g output reloads bit-for-bit
    return text.map(_to_float).astype(float)


def save_frame(frame: MarketFrame, path) -> None:
    """Write a frame in the long CSV layout accepted by :func:`load_ohlcv`."""
    table = frame.to_long()
    ts = pd.DatetimeIndex(table["date"])
    if (ts == ts.normalize()).all():
        table["date"] = ts.strftime("%Y-%m-%d")
    else:
        table["date"] = ts.strftime("%Y-%m-%dT%H:%M:%S")
    table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _ffill_bfill(a: np.ndarray) -> np.ndarray:
    return pd.DataFrame(a).ffill().bfill().to_numpy(dtype=float)


def fill_missing_with_report(frame: MarketFrame) -> tuple[MarketFrame, FillReport]:
    if frame.n_dates == 0:
        raise EmptyInputError("frame has no dates")
    observed = np.isfinite(frame.close)
    counts = observed.sum(axis=0)
    keep = [j for j in range(frame.n_tickers) if counts[j] > 0]
    dropped = [frame.tickers[j] for j in range(frame.n_tickers) if counts[j] == 0]
    if dropped:
        logger.warning("dropping tickers with no observations: %s", ", ".join(dropped))
    if not keep:
        raise EmptyInputError("no ticker has any observation")

    filled_cells = {}
    prices = {}
    close = frame.close[:, keep]
    filled_cells["close"] = int((~np.isfinite(close)).sum())
    prices["close"] = _ffill_bfill(close)
    for name in ("open", "high", "low"):
        arr = getattr(frame, name)[:, keep]
        filled_cells[name] = int((~np.isfinite(arr)).sum())
        arr = _ffill_bfill(arr)
        # a price field with no observations at all falls back to close
        arr = np.where(np.isfinite(arr), arr, prices["close"])
        prices[name] = arr
    volume = frame.volume[:, keep]
    filled_cells["volume"] = int((~np.isfinite(volume)).sum())
    volume = np.where(np.isfinite(volume), volume, 0.0)
    features = {}
    for name, arr in frame.features.items():
        arr = arr[:, keep]
        filled_cells[name] = int((~np.isfinite(arr)).sum())
        arr = _ffill_bfill(arr)
        features[name] = np.where(np.isfinite(arr), arr, 0.0)

    out = MarketFrame(
        dates=frame.dates,
        tickers=[frame.tickers[j] for j in keep],
        volume=volume,
        features=features,
        **prices,
    )
    report = FillReport(
        dropped_tickers=dropped,
        filled_cells=filled_cells,
        observed_counts={frame.tickers[j]: int(counts[j]) for j in keep},
    )
    return out, report


def fill_missing(frame: MarketFrame) -> MarketFrame:
    """Forward-fill then back-fill prices per ticker; missing volume becomes 0.

    Tickers with no observed close are dropped (logged as a warning).
    """
    return fill_missing_with_report(frame)[0]


def ema(series, span: int) -> np.ndarray:
    """Exponential moving average with alpha = 2/(span+1), seeded with the first value."""
    x = np.asarray(series, dtype=float)
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    if len(x) == 0:
        return out
    out[0] = x[0]
    for i in range(1, len(x)):
        out[i] = alpha * x[i] + (1.0 - alpha) * out[i - 1]
    return out


def compute_macd(close, fast: int = 12, slow: int = 26, signal: int = 9) -> np.ndarray:
    """MACD histogram: (EMA_fast - EMA_slow) minus its own EMA_signal."""
    close = np.asarray(close, dtype=float)
    if fast >= slow:
        raise ValueError("fast period must be shorter than slow period")
    if len(close) < slow:
        raise InsufficientHistoryError(f"MACD needs at least {slow} observations, got {len(close)}")
    line = ema(close, fast) - ema(close, slow)
    return line - ema(line, signal)


def compute_rsi(close, period: int = 14) -> np.ndarray:
    """Wilder RSI. The first ``period`` entries have no value and are NaN."""
    close = np.asarray(close, dtype=float)
    if len(close) < period + 1:
        raise InsufficientHistoryError(f"RSI needs at least {period + 1} observations, got {len(close)}")
    delta = np.diff(close)
    gains = np.maximum(delta, 0.0)
    losses = np.maximum(-delta, 0.0)
    out = np.full(len(close), np.nan)
    avg_gain = gains[:period].mean()
    avg_loss = losses[:period].mean()
    for i in range(period, len(close)):
        if i > period:
            avg_gain = (avg_gain * (period - 1) + gains[i - 1]) / period
            avg_loss = (avg_loss * (period - 1) + losses[i - 1]) / period
        if avg_loss == 0.0:
            out[i] = 100.0
        elif avg_gain == 0.0:
            out[i] = 0.0
        else:
            out[i] = 100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    return out


def add_indicators(
    frame: MarketFrame,
    macd: tuple[int, int, int] = (12, 26, 9),
    rsi_period: int = 14,
    observed_counts: Mapping[str, int] | None = None,
) -> MarketFrame:
    """Attach ``macd`` and ``rsi`` feature matrices to a rectangular frame.

    Tickers with fewer than ``slow + signal`` observations get the neutral
    values (MACD 0, RSI 50) and a warning instead of failing the run. RSI
    warm-up rows are also set to 50.
    """
    fast, slow, sig = macd
    counts = observed_counts or {}
    macd_panel = np.zeros(frame.close.shape)
    rsi_panel = np.full(frame.close.shape, 50.0)
    short = []
    for j, tic in enumerate(frame.tickers):
        n_obs = counts.get(tic, frame.n_dates)
        if n_obs < slow + sig or frame.n_dates < max(slow, rsi_period + 1):
            short.append(tic)
            continue
        macd_panel[:, j] = compute_macd(frame.close[:, j], fast, slow, sig)
        r = compute_rsi(frame.close[:, j], rsi_period)
        rsi_panel[:, j] = np.where(np.isnan(r), 50.0, r)
    if short:
        logger.warning("too little history for indicators, using neutral values: %s", ", ".join(short))
    return frame.with_features(macd=macd_panel, rsi=rsi_panel)


def prepare_frame(frame: MarketFrame, indicators: bool = True, **indicator_kwargs) -> tuple[MarketFrame, FillReport]:
    clean, report = fill_missing_with_report(frame)
    if indicators:
        clean = add_indicators(clean, observed_counts=report.observed_counts, **indicator_kwargs)
    return clean, report


def _interval(rng) -> tuple[np.datetime64, np.datetime64]:
    start, end = rng
    start, end = to_datetime64(start), to_datetime64(end)
    if end < start:
        raise LeakageError(f"interval end {end} precedes start {start}")
    return start, end


def split(frame: MarketFrame, train_range, test_range, trade_range) -> DataSplit:
    """Chronological train/test/trade split over inclusive date intervals."""
    tr, te, td = _interval(train_range), _interval(test_range), _interval(trade_range)
    if not tr[1] < te[0]:
        raise LeakageError(f"test interval starting {te[0]} overlaps train interval ending {tr[1]}")
    if not te[1] < td[0]:
        raise LeakageError(f"trade interval starting {td[0]} overlaps test interval ending {te[1]}")
    parts = []
    for label, (a, b) in (("train", tr), ("test", te), ("trade", td)):
        part = frame.slice_dates(a, b)
        if part.n_dates == 0:
            raise EmptyWindowError(f"{label} interval {a}..{b} contains no dates of the frame")
        parts.append(part)
    return DataSplit(*parts)


class Fetcher(Protocol):
    """Anything that can produce a MarketFrame for tickers over a date range."""

    def fetch(self, tickers: Sequence[str] | None, start=None, end=None) -> MarketFrame: ...


class CsvFetcher:
    def __init__(self, path, schema: Mapping[str, str] | None = None):
        self.path = Path(path)
        self.schema = dict(schema or {})

    def fetch(self, tickers: Sequence[str] | None = None, start=None, end=None) -> MarketFrame:
        frame = load_ohlcv(self.path, self.schema)
        if tickers is not None:
            unknown = set(tickers) - set(frame.tickers)
            if unknown:
                raise SchemaError(f"tickers not in {self.path}: {sorted(unknown)}")
            frame = frame.select_tickers(list(tickers))
        return frame.slice_dates(start, end)
