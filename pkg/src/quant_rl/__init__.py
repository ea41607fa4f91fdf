"""Deep reinforcement learning for quantitative trading, built on numpy."""

__version__ = "0.1.0"
