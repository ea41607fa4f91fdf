import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quant_rl.market_data import frame_from_close  # noqa: E402


def alternating_prices(n_dates=21, low=10.0, high=20.0):
    a = np.array([low if t % 2 == 0 else high for t in range(n_dates)])
    return np.c_[a, low + high - a]


def uptrend_prices(n_dates=31, start=100.0, growth=0.01):
    return start * (1.0 + growth) ** np.arange(n_dates)


def random_walk(rng, n_dates, n_assets, drift=0.0005, vol=0.01, start=100.0):
    steps = rng.normal(drift, vol, size=(n_dates, n_assets))
    steps[0] = 0.0
    return start * np.exp(np.cumsum(steps, axis=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def walk_frame(rng):
    return frame_from_close(random_walk(rng, 120, 3), ["AAA", "BBB", "CCC"])


@pytest.fixture
def csv_text():
    return (
        "date,tic,open,high,low,close,volume\n"
        "2021-01-04,AAA,10,11,9,10.5,100\n"
        "2021-01-04,BBB,20,21,19,20.5,200\n"
        "2021-01-05,AAA,10.5,12,10,11.5,150\n"
        "2021-01-05,BBB,20.5,22,20,21.5,250\n"
        "2021-01-06,AAA,11.5,12,11,11.0,120\n"
        "2021-01-06,BBB,21.5,22,21,21.0,220\n"
    )


def write_ohlcv(path, frame):
    from quant_rl.market_data import save_frame

    save_frame(frame, path)
    return path
