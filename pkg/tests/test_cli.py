import hashlib
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from conftest import random_walk, write_ohlcv
from quant_rl import cli
from quant_rl.backtest import EquityCurve
from quant_rl.errors import ConfigError, NumericError
from quant_rl.market_data import frame_from_close, load_ohlcv

FAST = {"hidden": [8, 8], "learning_starts": 8, "batch_size": 8, "n_steps": 16, "n_epochs": 2}


@pytest.fixture
def year_csv(tmp_path):
    rng = np.random.default_rng(7)
    close = random_walk(rng, len(pd.bdate_range("2021-01-01", "2021-12-31")), 2)
    frame = frame_from_close(close, ["AAA", "BBB"], start="2021-01-01")
    return write_ohlcv(tmp_path / "prices.csv", frame)


def _config(tmp_path, name="c.json", **extra):
    data = {
        "data": {"path": "prices.csv"},
        "algorithm": "ppo",
        "agent": FAST,
        "env": {"initial_capital": 100_000, "k_max": 50, "cost": {"rate": 0.001}, "reward_scaling": 1e-4},
        "total_steps": 48,
        "windows": {"unit": "M", "train": 6, "test": 2, "trade": 2},
        "seed": 3,
    }
    data.update(extra)
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=1))
    return path


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- ingest ------------------------------------------------------------------------------

def test_ingest_happy_path_and_determinism(tmp_path, year_csv, capsys):
    assert cli.main(["ingest", str(year_csv), "--out", str(tmp_path / "a")]) == 0
    assert "2 tickers" in capsys.readouterr().out
    assert cli.main(["ingest", str(year_csv), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "frame.csv").read_bytes() == (tmp_path / "b" / "frame.csv").read_bytes()
    frame = load_ohlcv(tmp_path / "a" / "frame.csv")
    assert {"macd", "rsi"} <= set(frame.features)
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["tickers"] == ["AAA", "BBB"] and summary["start"] == "2021-01-01"


def test_ingest_missing_close(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,tic,open,high,low,volume\n2021-01-04,AAA,1,1,1,5\n")
    assert cli.main(["ingest", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "close" in err and len(err.strip().splitlines()) == 1


def test_ingest_missing_file(tmp_path):
    assert cli.main(["ingest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2


# --- train ---------------------------------------------------------------------------------

def test_train_artifacts_and_manifest(tmp_path, year_csv):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--algo", "ppo", "--out", str(out)]) == 0
    assert (out / "model.json").exists() and (out / "diagnostics.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == _sha(cfg)
    assert (out / "config.json").read_bytes() == cfg.read_bytes()
    assert manifest["seed"] == 3


def test_train_seed_flag_is_reproducible(tmp_path, year_csv):
    cfg = _config(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()
    assert cli.main(["train", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "model.json").read_bytes() != (tmp_path / "c" / "model.json").read_bytes()


def test_train_with_split_writes_test_curve(tmp_path, year_csv):
    cfg = _config(tmp_path, split={"train": ["2021-01-01", "2021-08-31"], "test": ["2021-09-01", "2021-10-29"]})
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    curve = EquityCurve.from_csv(out / "test_equity.csv")
    assert str(curve.dates[0])[:10] == "2021-09-01"
    assert "test_report" in json.loads((out / "diagnostics.json").read_text())


def test_train_unknown_algorithm(tmp_path, year_csv, capsys):
    cfg = _config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--algo", "maddpg", "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "ppo" in err and "dqn" in err


def test_train_config_errors(tmp_path, year_csv):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    assert cli.main(["train", "--config", str(bad_json), "--out", str(tmp_path / "o")]) == 2
    cfg = _config(tmp_path, agent={"learning_rate": 1})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_train_numeric_failure_exit_3(tmp_path, year_csv, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise NumericError("non-finite gradient")

    monkeypatch.setattr(cli, "train_model", explode)
    cfg = _config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "training ppo" in capsys.readouterr().err


def test_set_overrides(tmp_path, year_csv):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    args = ["train", "--config", str(cfg), "--out", str(out), "--set", "agent.lr=0.01", "--set", "total_steps=32"]
    assert cli.main(args) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["agent"]["lr"] == 0.01 and resolved["total_steps"] == 32
    assert json.loads((out / "diagnostics.json").read_text())["total_steps"] == 32
    # the stored config stays the raw input file
    assert _sha(out / "config.json") == _sha(cfg)


# --- seeds --------------------------------------------------------------------------------

def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    assert cli.resolve_seed({"seed": 4}, None) == 4
    assert cli.resolve_seed({}, None) == 0
    monkeypatch.setenv(cli.SEED_ENV, "9")
    assert cli.resolve_seed({"seed": 4}, None) == 9
    assert cli.resolve_seed({"seed": 4}, 1) == 1
    monkeypatch.setenv(cli.SEED_ENV, "nine")
    with pytest.raises(ConfigError):
        cli.resolve_seed({}, None)


def test_env_seed_reaches_manifest(tmp_path, year_csv, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "21")
    cfg = _config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 21


# --- pipeline ------------------------------------------------------------------------------

def test_pipeline_monthly_windows(tmp_path, year_csv, capsys):
    cfg = _config(tmp_path, windows={"unit": "M", "train": 6, "test": 2, "trade": 2, "stride": 2})
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("window_*")) == ["window_000", "window_001"]
    curve = EquityCurve.from_csv(out / "equity.csv")
    assert str(curve.dates[0])[:10] == "2021-09-01" and str(curve.dates[-1])[:10] == "2021-12-31"
    rep = json.loads((out / "report.json").read_text())
    assert "buy_and_hold" in rep["rows"]
    assert "window 1: selected" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == _sha(cfg) and len(manifest["artifacts"]["windows"]) == 2


def test_pipeline_ensemble_flag(tmp_path, year_csv):
    cfg = _config(tmp_path, total_steps=32)
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(out), "--ensemble", "ppo,a2c,ddpg"]) == 0
    sel = json.loads((out / "selection.json").read_text())["selection"]
    assert len(sel) == 2 and all(s["selected"] in ("ppo", "a2c", "ddpg") for s in sel)
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(out), "--ensemble", "ppo,xyz"]) == 2


def test_pipeline_overlapping_windows(tmp_path, year_csv, capsys):
    cfg = _config(tmp_path, windows={"intervals": [["2021-01-01", "2021-06-30", "2021-06-15", "2021-08-31",
                                                    "2021-09-01", "2021-12-31"]]})
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "overlap" in capsys.readouterr().err


def test_pipeline_reproducible(tmp_path, year_csv):
    cfg = _config(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name), "--jobs", "2"]) == 0
    for f in ("equity.csv", "report.json", "selection.json", "window_001/model.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# --- backtest -------------------------------------------------------------------------------

def test_backtest_with_baselines(tmp_path, year_csv):
    frame = load_ohlcv(year_csv)
    sub = np.arange(100, 160)
    EquityCurve(frame.dates[sub], 1000 * frame.close[sub, 0] / frame.close[100, 0]).to_csv(tmp_path / "c.csv")
    out = tmp_path / "bt"
    args = ["backtest", "--curve", str(tmp_path / "c.csv"), "--frame", str(year_csv), "--out", str(out),
            "--baselines", "buyhold,equal,minvar"]
    assert cli.main(args) == 0
    rows = json.loads((out / "report.json").read_text())["rows"]
    assert set(rows) == {"strategy", "buy_and_hold", "equal_weight", "min_variance"}
    for key in ("cumulative_return", "annualized_return", "annualized_std", "sharpe", "max_drawdown",
                "final_value"):
        assert rows["strategy"][key] is not None


def test_backtest_flat_curve(tmp_path, capsys):
    dates = pd.bdate_range("2021-01-01", periods=10).to_numpy()
    EquityCurve(dates, np.full(10, 50.0)).to_csv(tmp_path / "flat.csv")
    assert cli.main(["backtest", "--curve", str(tmp_path / "flat.csv"), "--out", str(tmp_path / "o")]) == 0
    assert "degenerate" in capsys.readouterr().out


def test_backtest_bad_inputs(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,value\n2021-01-01,abc\n")
    assert cli.main(["backtest", "--curve", str(bad), "--out", str(tmp_path / "o")]) == 2
    dates = pd.bdate_range("2021-01-01", periods=5).to_numpy()
    EquityCurve(dates, np.arange(1.0, 6.0)).to_csv(tmp_path / "c.csv")
    assert cli.main(["backtest", "--curve", str(tmp_path / "c.csv"), "--out", str(tmp_path / "o"),
                     "--baselines", "buyhold"]) == 2
    assert cli.main(["backtest", "--curve", str(tmp_path / "c.csv"), "--out", str(tmp_path / "o"),
                     "--baselines", "sortino"]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["train"]) == 2
    proc = subprocess.run([sys.executable, "-m", "quant_rl.cli", "backtest", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
