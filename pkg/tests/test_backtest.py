import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_walk
from oracles import (
    brute_annualized_return,
    brute_annualized_std,
    brute_cumulative_return,
    brute_max_drawdown,
    brute_sharpe,
    random_psd,
)
from quant_rl.backtest import (
    EquityCurve,
    annualized_return,
    annualized_std,
    baseline_buy_hold,
    baseline_equal_weight,
    baseline_min_variance,
    cumulative_return,
    max_drawdown,
    metric_row,
    min_variance_weights,
    periods_per_year,
    report,
    sharpe,
)
from quant_rl.errors import DegenerateSeriesError, DomainError, EmptyInputError, InsufficientHistoryError
from quant_rl.market_data import frame_from_close


def _curve(values, ppy=252):
    dates = pd.date_range("2020-01-01", periods=len(values), freq="D").to_numpy()
    return EquityCurve(dates, np.asarray(values, dtype=float), ppy)


positive_curves = st.lists(st.floats(1.0, 1e6), min_size=3, max_size=80)


# --- metrics ------------------------------------------------------------------------

def test_cumulative_return_examples():
    assert cumulative_return(_curve([5, 5, 5])) == 0
    assert cumulative_return(_curve([1_000_000, 1_200_000, 1_520_000])) == pytest.approx(0.52, abs=1e-15)


def test_annualized_return_examples():
    doubling = _curve(np.linspace(100, 200, 253))
    assert annualized_return(doubling) == pytest.approx(1.0, abs=1e-12)
    g = 0.001
    assert annualized_return(_curve(100 * (1 + g) ** np.arange(50))) == pytest.approx((1 + g) ** 252 - 1, rel=1e-10)
    assert annualized_return(_curve([3, 3])) == 0


def test_annualized_std_examples():
    assert annualized_std(_curve(100 * 1.01 ** np.arange(30))) == pytest.approx(0, abs=1e-12)
    r = np.array([0.01, -0.01] * 10)
    v = 100 * np.cumprod(np.r_[1, 1 + r])
    sigma = math.sqrt(sum((x - r.mean()) ** 2 for x in r) / (len(r) - 1))
    assert annualized_std(_curve(v)) == pytest.approx(sigma * math.sqrt(252), rel=1e-12)
    with pytest.raises(DegenerateSeriesError):
        annualized_std(_curve([1, 2]))


def test_max_drawdown_examples():
    assert max_drawdown(_curve([1, 2, 3, 4])) == 0
    assert max_drawdown(_curve([100, 120, 90, 110])) == pytest.approx(-0.25, abs=1e-15)


def test_sharpe_examples():
    r = np.array([0.01, -0.01, 0.02, -0.02])
    v = np.r_[100.0, 100.0 * np.cumprod(1 + r)]
    v_zero = _curve(v)
    # returns whose arithmetic mean is exactly zero
    assert sharpe(v_zero) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateSeriesError):
        sharpe(_curve(100 * 1.01 ** np.arange(10)))


def test_sharpe_decreases_with_risk_free(rng):
    c = _curve(random_walk(rng, 50, 1)[:, 0])
    assert sharpe(c, 0.0) > sharpe(c, 0.0001) > sharpe(c, 0.001)


@settings(max_examples=200, deadline=None)
@given(positive_curves)
def test_metrics_match_oracles(values):
    c = _curve(values)
    assert cumulative_return(c) == pytest.approx(brute_cumulative_return(values), rel=1e-12, abs=1e-12)
    assert max_drawdown(c) == brute_max_drawdown(values)
    ar = brute_annualized_return(values, 252)
    if math.isfinite(ar):
        assert annualized_return(c) == pytest.approx(ar, rel=1e-9, abs=1e-12)
    else:
        with pytest.raises(DegenerateSeriesError):
            annualized_return(c)
    sd = brute_annualized_std(values, 252)
    assert annualized_std(c) == pytest.approx(sd, rel=1e-10, abs=1e-14)
    if sd > 1e-9:
        assert sharpe(c) == pytest.approx(brute_sharpe(values, 252), rel=1e-10, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(positive_curves, st.floats(0.01, 1000))
def test_scale_invariance(values, k):
    a, b = _curve(values), _curve(np.asarray(values) * k)
    assert cumulative_return(b) == pytest.approx(cumulative_return(a), rel=1e-9, abs=1e-12)
    assert annualized_std(b) == pytest.approx(annualized_std(a), rel=1e-9, abs=1e-12)
    assert max_drawdown(b) == pytest.approx(max_drawdown(a), rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(positive_curves)
def test_drawdown_and_log_identity(values):
    c = _curve(values)
    mdd = max_drawdown(c)
    assert mdd <= 0
    never_below = all(values[t] >= max(values[: t + 1]) for t in range(len(values)))
    assert (mdd == 0) == never_below
    logs = np.log(np.asarray(values[1:]) / np.asarray(values[:-1]))
    assert math.expm1(math.fsum(logs)) == pytest.approx(cumulative_return(c), rel=1e-9, abs=1e-9)


def test_periods_per_year_presets():
    assert periods_per_year("daily") == 252 and periods_per_year("5min") == 105120
    with pytest.raises(DomainError):
        periods_per_year("hourly")


def test_curve_validation():
    with pytest.raises(DomainError):
        _curve([1, 0, 2])
    d = pd.to_datetime(["2020-01-02", "2020-01-01"]).to_numpy()
    with pytest.raises(DomainError):
        EquityCurve(d, np.array([1.0, 2.0]))


def test_curve_csv_round_trip(tmp_path, rng):
    c = _curve(rng.uniform(1, 1e6, size=20))
    c.to_csv(tmp_path / "c.csv")
    d = EquityCurve.from_csv(tmp_path / "c.csv")
    assert np.array_equal(c.values, d.values) and np.array_equal(c.dates, d.dates)


# --- baselines ----------------------------------------------------------------------------

def test_buy_hold_examples():
    f = frame_from_close(np.array([[10.0, 5.0], [20.0, 1.0], [20.0, 50.0]]))
    c = baseline_buy_hold(f, [1.0, 0.0], capital=100)
    assert c.values.tolist() == [100.0, 200.0, 200.0]
    single = baseline_buy_hold(frame_from_close(np.array([10.0, 15.0, 20.0])), capital=50)
    assert single.values[-1] == 100.0


def test_buy_hold_index_identity(rng):
    index = random_walk(rng, 100, 1)[:, 0]
    c = baseline_buy_hold(frame_from_close(index))
    assert cumulative_return(c) == pytest.approx(index[-1] / index[0] - 1, rel=1e-12)


def test_equal_weight_identical_assets(rng):
    p = random_walk(rng, 40, 1)[:, 0]
    both = baseline_equal_weight(frame_from_close(np.c_[p, p]), capital=1000)
    one = baseline_buy_hold(frame_from_close(p), capital=1000)
    assert np.allclose(both.values, one.values, rtol=1e-12, atol=0)


def test_equal_weight_single_asset_is_buy_hold(rng):
    p = random_walk(rng, 40, 1)[:, 0]
    f = frame_from_close(p)
    assert np.allclose(baseline_equal_weight(f).values, baseline_buy_hold(f).values, rtol=1e-12, atol=0)


def test_equal_weight_ledger():
    # hand ledger, rebalanced every 2 dates, capital 1000
    close = np.array([[10.0, 20.0], [20.0, 20.0], [10.0, 40.0], [10.0, 20.0]])
    c = baseline_equal_weight(frame_from_close(close), capital=1000, rebalance=2)
    # t0: 50 A, 25 B -> 1000; t1: 50*20 + 25*20 = 1500
    # t2: value 50*10 + 25*40 = 1500, rebalance to 75 A, 18.75 B
    # t3: 75*10 + 18.75*20 = 1125
    assert np.allclose(c.values, [1000, 1500, 1500, 1125], rtol=1e-10, atol=0)


def test_min_variance_two_asset_closed_form():
    s1, s2 = 0.04, 0.01
    w = min_variance_weights(np.diag([s1, s2]), long_only=False, ridge=0.0)
    assert w[0] == pytest.approx(s2 / (s1 + s2), abs=1e-12)


def test_min_variance_identical_assets():
    cov = np.full((3, 3), 0.02) + np.eye(3) * 0.01
    assert np.allclose(min_variance_weights(cov), 1 / 3, rtol=0, atol=1e-12)


def test_min_variance_first_order_condition(rng):
    for _ in range(50):
        n = int(rng.integers(2, 8))
        cov = random_psd(rng, n) * 1e-4
        w = min_variance_weights(cov, long_only=False, ridge=0.0)
        assert w.sum() == pytest.approx(1.0, abs=1e-10)
        g = cov @ w
        assert np.allclose(g, g.mean(), rtol=1e-6, atol=0)
        eq = np.full(n, 1 / n)
        assert w @ cov @ w <= eq @ cov @ eq + 1e-18


def test_min_variance_long_only_projection():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]]) * np.array([[1], [2]]) * np.array([1, 2])
    w_free = min_variance_weights(cov, long_only=False, ridge=0.0)
    w = min_variance_weights(cov, ridge=0.0)
    assert w_free.min() < 0
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_min_variance_needs_history(rng):
    f = frame_from_close(random_walk(rng, 30, 3))
    with pytest.raises(InsufficientHistoryError):
        baseline_min_variance(f, lookback=20)
    with pytest.raises(InsufficientHistoryError):
        baseline_min_variance(f, lookback=4)


def test_min_variance_baseline_uses_history(rng):
    p = random_walk(rng, 100, 3)
    full = frame_from_close(p)
    hist, live = full.take(range(60)), full.take(range(60, 100))
    c = baseline_min_variance(live, capital=1000, lookback=40, rebalance=10, history=hist)
    assert c.values[0] == pytest.approx(1000) and len(c) == 40
    # first weights come from returns strictly before the live window's first close
    r = p[1:61] / p[:60] - 1
    w0 = min_variance_weights(np.cov(r[-40:], rowvar=False, ddof=1))
    assert c.values[1] == pytest.approx(1000 * float(w0 @ (p[61] / p[60])), rel=1e-12)


# --- report ------------------------------------------------------------------------------

def test_report_reflexive(rng):
    c = _curve(random_walk(rng, 60, 1)[:, 0])
    rep = report(c, {"same": c})
    assert vars(rep.rows["strategy"]) == vars(rep.rows["same"])


def test_report_flat_curve():
    rep = report(_curve([100.0] * 10))
    row = rep.strategy
    assert row.cumulative_return == 0 and row.annualized_return == 0 and row.max_drawdown == 0
    assert row.sharpe is None and "sharpe" in row.degenerate
    assert "degenerate" in rep.to_text()


def test_report_matches_direct_metrics(rng):
    c = _curve(random_walk(rng, 60, 1)[:, 0])
    row = metric_row(c, 0.0001)
    assert row.cumulative_return == cumulative_return(c)
    assert row.annualized_return == annualized_return(c)
    assert row.annualized_std == annualized_std(c)
    assert row.sharpe == sharpe(c, 0.0001)
    assert row.max_drawdown == max_drawdown(c)
    assert row.final_value == c.values[-1]


def test_report_truncates_baselines(rng):
    long = _curve(random_walk(rng, 100, 1)[:, 0])
    short = EquityCurve(long.dates[20:50], long.values[20:50])
    rep = report(short, {"base": long})
    assert rep.rows["base"].initial_value == long.values[20]
    assert rep.start == "2020-01-21"
    js = rep.to_json()
    assert '"base"' in js and '"strategy"' in js


def test_report_empty_baseline_range(rng):
    a = _curve(random_walk(rng, 10, 1)[:, 0])
    b = EquityCurve(a.dates + np.timedelta64(100, "D"), a.values)
    with pytest.raises(EmptyInputError):
        report(a, {"late": b})
