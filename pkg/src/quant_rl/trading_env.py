"""Time-driven market simulation for share trading and portfolio allocation.

The environment walks a :class:`~quant_rl.market_data.MarketFrame` one
date at a time. Orders execute at the close of the decision date, then the
clock advances and the portfolio is marked to the next close.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import DegenerateSeriesError, DomainError, EnvError, IncompatibilityError, ModeError, ShapeError, TooShortError
from .market_data import MarketFrame

DISCRETE = "discrete_shares"
PORTFOLIO = "portfolio_weights"
MODES = (DISCRETE, PORTFOLIO)
REWARD_KINDS = ("delta_value", "log_return", "sharpe")
MAX_DISCRETE_ASSETS = 6


@dataclass(frozen=True)
class CostModel:
    """Per-order fee plus an adverse half-spread on the execution price.

    ``kind`` selects the fee: ``flat_fee`` charges ``flat`` per executed
    order, ``per_share_pct`` charges ``rate`` times the traded notional at
    the execution price.
    """

    kind: str = "per_share_pct"
    flat: float = 0.0
    rate: float = 0.0
    half_spread: float = 0.0

    def __post_init__(self):
        if self.kind not in ("flat_fee", "per_share_pct"):
            raise DomainError(f"unknown cost kind {self.kind!r}")
        if not self.flat >= 0:
            raise DomainError("flat fee must be >= 0")
        if not 0 <= self.rate < 1:
            raise DomainError("rate must be in [0, 1)")
        if not 0 <= self.half_spread < 1:
            raise DomainError("half_spread must be in [0, 1)")

    def fee(self, notional: float) -> float:
        if notional <= 0:
            return 0.0
        return self.flat if self.kind == "flat_fee" else self.rate * notional


@dataclass(frozen=True)
class TurbulenceModel:
    mean: np.ndarray
    precision: np.ndarray
    threshold: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        prec = np.asarray(self.precision, dtype=float)
        if prec.shape != (len(mean), len(mean)):
            raise ShapeError(f"precision shape {prec.shape} does not match mean length {len(mean)}")
        if not np.allclose(prec, prec.T, rtol=0, atol=1e-9):
            raise DomainError("precision matrix must be symmetric")
        if not self.threshold > 0:
            raise DomainError("turbulence threshold must be > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)


def fit_turbulence(frame: MarketFrame, threshold: float, ridge: float = 1e-8) -> TurbulenceModel:
    """Estimate mean and inverse covariance of daily returns over ``frame``."""
    y = frame.returns()
    if len(y) < 2:
        raise TooShortError("need at least 3 dates to estimate turbulence statistics")
    mu = y.mean(axis=0)
    cov = np.atleast_2d(np.cov(y, rowvar=False, ddof=1))
    prec = np.linalg.inv(cov + ridge * np.eye(len(mu)))
    prec = 0.5 * (prec + prec.T)
    return TurbulenceModel(mu, prec, float(threshold))


def turbulence_index(y, model: TurbulenceModel) -> float:
    """Mahalanobis-style distance (y - mu)' P (y - mu) of a return vector."""
    y = np.asarray(y, dtype=float)
    if y.shape != model.mean.shape:
        raise ShapeError(f"return vector shape {y.shape} does not match model {model.mean.shape}")
    d = y - model.mean
    return max(float(d @ model.precision @ d), 0.0)


@dataclass(frozen=True)
class ActionSpec:
    mode: str
    trade: np.ndarray | None = None
    weights: np.ndarray | None = None
    k_max: int | None = None
    liquidate: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown action mode {self.mode!r}")
        if self.mode == DISCRETE:
            if self.trade is None:
                raise ShapeError("discrete action needs a trade vector")
            trade = np.asarray(self.trade, dtype=float)
            if not np.isfinite(trade).all():
                raise DomainError("non-finite value in trade vector")
            if not np.array_equal(trade, np.round(trade)):
                raise DomainError("trade vector must be integer-valued")
            if self.k_max is None or self.k_max <= 0:
                raise DomainError("k_max must be a positive integer")
            if not self.liquidate and np.any(np.abs(trade) > self.k_max):
                raise DomainError(f"|trade| exceeds k_max={self.k_max}")
            object.__setattr__(self, "trade", trade.astype(np.int64))
        else:
            if self.weights is None:
                raise ShapeError("portfolio action needs a weight vector")
            w = np.asarray(self.weights, dtype=float)
            if not np.isfinite(w).all():
                raise DomainError("non-finite value in weight vector")
            if np.any(w < 0):
                raise DomainError("weights must be non-negative")
            total = w.sum()
            if self.liquidate:
                if total != 0:
                    raise DomainError("liquidation weights must be all zero")
            elif abs(total - 1.0) > 1e-9:
                raise DomainError(f"weights sum to {total}, expected 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def shares(cls, trade, k_max: int) -> "ActionSpec":
        return cls(DISCRETE, trade=trade, k_max=int(k_max))

    @classmethod
    def portfolio(cls, weights) -> "ActionSpec":
        return cls(PORTFOLIO, weights=weights)

    @property
    def size(self) -> int:
        return len(self.trade) if self.mode == DISCRETE else len(self.weights)


def risk_gate(action: ActionSpec, turbulence: float, threshold: float) -> ActionSpec:
    """Halt trading while turbulence is strictly above the threshold.

    Discrete actions become "sell everything, buy nothing"; portfolio
    actions become an all-cash rebalance.
    """
    if not turbulence > threshold:
        return action
    if action.mode == DISCRETE:
        return replace(action, trade=np.minimum(action.trade, 0), liquidate=True)
    return replace(action, weights=np.zeros_like(action.weights), liquidate=True)


def reward_delta_value(v: float, v_prime: float) -> float:
    return float(v_prime - v)


def reward_log_return(v: float, v_prime: float) -> float:
    if not (v > 0 and v_prime > 0):
        raise DomainError(f"log return needs positive values, got {v} and {v_prime}")
    return math.log(v_prime / v)


def reward_sharpe(episode_returns, risk_free: float = 0.0) -> float:
    """(mean(R) - R_f) / std(R) with sample std, R_t = v_t - v_{t-1}."""
    r = np.asarray(episode_returns, dtype=float)
    if len(r) < 2:
        raise DegenerateSeriesError("Sharpe reward needs at least two returns")
    sd = r.std(ddof=1)
    if not sd > 0:
        raise DegenerateSeriesError("Sharpe reward undefined for zero-variance returns")
    return float((r.mean() - risk_free) / sd)


@dataclass(frozen=True)
class TradingState:
    balance: float
    shares: np.ndarray
    prices: np.ndarray
    indicators: Mapping[str, np.ndarray] = field(default_factory=dict)
    turbulence: float = 0.0
    step_index: int = 0

    @property
    def value(self) -> float:
        return float(self.balance + self.shares @ self.prices)


@dataclass(frozen=True)
class StepResult:
    next_state: TradingState
    reward: float
    done: bool
    info: dict


def _round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class TradingEnv:
    """Gym-style market environment over a rectangular MarketFrame.

    Parameters mirror :func:`make_env`. ``reward_scaling`` multiplies every
    reward; ``weight_scale`` multiplies actor outputs before the softmax in
    portfolio mode.
    """

    def __init__(
        self,
        frame: MarketFrame,
        mode: str = DISCRETE,
        initial_capital: float = 1_000_000.0,
        k_max: int = 100,
        cost: CostModel | None = None,
        turbulence: TurbulenceModel | None = None,
        reward_kind: str = "delta_value",
        reward_scaling: float = 1.0,
        risk_free: float = 0.0,
        feature_names=None,
        weight_scale: float = 3.0,
    ):
        if mode not in MODES:
            raise ModeError(f"unknown env mode {mode!r}; expected one of {MODES}")
        if reward_kind not in REWARD_KINDS:
            raise DomainError(f"unknown reward kind {reward_kind!r}; expected one of {REWARD_KINDS}")
        if frame.n_dates < 2:
            raise TooShortError(f"environment needs at least 2 dates, frame has {frame.n_dates}")
        if not frame.is_rectangular():
            raise ShapeError("frame has missing cells; run fill_missing first")
        if not initial_capital > 0:
            raise DomainError("initial capital must be positive")
        if int(k_max) <= 0:
            raise DomainError("k_max must be a positive integer")
        if turbulence is not None and turbulence.mean.shape != (frame.n_tickers,):
            raise ShapeError("turbulence model dimension does not match the frame")

        self.frame = frame
        self.mode = mode
        self.initial_capital = float(initial_capital)
        self.k_max = int(k_max)
        self.cost = cost or CostModel()
        self.turbulence_model = turbulence
        self.reward_kind = reward_kind
        self.reward_scaling = float(reward_scaling)
        self.risk_free = float(risk_free)
        self.weight_scale = float(weight_scale)
        if feature_names is None:
            feature_names = sorted(frame.features)
        missing = [f for f in feature_names if f not in frame.features]
        if missing:
            raise ShapeError(f"features not in frame: {missing}")
        self.feature_names = tuple(feature_names)

        self.n_assets = frame.n_tickers
        self._close = frame.close
        self._base_prices = frame.close[0]
        self._turbulence = self._turbulence_series()
        self._t = 0
        self._balance = self.initial_capital
        self._shares = self._zero_shares()
        self._values: list[float] = []
        self._done = True

    def params(self) -> dict:
        return dict(
            mode=self.mode,
            initial_capital=self.initial_capital,
            k_max=self.k_max,
            cost=self.cost,
            turbulence=self.turbulence_model,
            reward_kind=self.reward_kind,
            reward_scaling=self.reward_scaling,
            risk_free=self.risk_free,
            feature_names=self.feature_names,
            weight_scale=self.weight_scale,
        )

    def clone(self, frame: MarketFrame | None = None, **overrides) -> "TradingEnv":
        params = self.params()
        params.update(overrides)
        return TradingEnv(frame if frame is not None else self.frame, **params)

    @property
    def n_steps(self) -> int:
        return self.frame.n_dates - 1

    @property
    def observation_dim(self) -> int:
        n = self.n_assets
        return 1 + 2 * n + n * len(self.feature_names) + (1 if self.turbulence_model else 0)

    @property
    def action_dim(self) -> int:
        return self.n_assets

    @property
    def values(self) -> np.ndarray:
        """Portfolio value at every date visited so far in the episode."""
        return np.array(self._values)

    def _zero_shares(self) -> np.ndarray:
        return np.zeros(self.n_assets, dtype=np.int64 if self.mode == DISCRETE else float)

    def _turbulence_series(self) -> np.ndarray:
        out = np.zeros(self.frame.n_dates)
        if self.turbulence_model is None:
            return out
        # the first date has no prior close; its return is taken as zero
        y = np.vstack([np.zeros(self.n_assets), self.frame.returns()])
        for t in range(self.frame.n_dates):
            out[t] = turbulence_index(y[t], self.turbulence_model)
        return out

    @property
    def turbulence_values(self) -> np.ndarray:
        return self._turbulence.copy()

    def _state(self) -> TradingState:
        t = self._t
        return TradingState(
            balance=float(self._balance),
            shares=self._shares.copy(),
            prices=self._close[t].copy(),
            indicators={k: self.frame.features[k][t].copy() for k in self.feature_names},
            turbulence=float(self._turbulence[t]),
            step_index=t,
        )

    def reset(self, seed: int | None = None) -> TradingState:
        # prices are exogenous, so the seed does not change the trajectory
        self.seed = seed
        self._t = 0
        self._balance = self.initial_capital
        self._shares = self._zero_shares()
        self._values = [self.initial_capital]
        self._done = False
        return self._state()

    def encode(self, state: TradingState) -> np.ndarray:
        """Scale-free observation vector for the agents."""
        cap = self.initial_capital
        parts = [
            np.array([state.balance / cap]),
            state.prices / self._base_prices,
            np.asarray(state.shares, dtype=float) * self._base_prices / cap,
        ]
        for name in self.feature_names:
            f = np.asarray(state.indicators[name], dtype=float)
            if name == "macd":
                f = f / state.prices
            elif name == "rsi":
                f = f / 100.0
            parts.append(f)
        if self.turbulence_model is not None:
            parts.append(np.array([min(state.turbulence / self.turbulence_model.threshold, 10.0)]))
        return np.concatenate(parts)

    def decode(self, output) -> ActionSpec:
        """Map a continuous actor output to an executable action.

        Discrete mode rounds ``output * k_max`` (halves toward zero);
        portfolio mode applies a softmax.
        """
        out = np.asarray(output, dtype=float).reshape(-1)
        if out.shape != (self.n_assets,):
            raise ShapeError(f"actor output has {out.size} entries, expected {self.n_assets}")
        if not np.isfinite(out).all():
            raise DomainError("NaN in actor output")
        if self.mode == DISCRETE:
            trade = _round_half_toward_zero(np.clip(out, -1.0, 1.0) * self.k_max)
            return ActionSpec.shares(trade, self.k_max)
        return ActionSpec.portfolio(_softmax(self.weight_scale * out))

    def discrete_actions(self) -> np.ndarray:
        """Joint {-1, 0, 1}^n action table scaled by k_max (sell/hold/buy)."""
        if self.mode != DISCRETE:
            raise IncompatibilityError("discrete action table only exists in discrete_shares mode")
        if self.n_assets > MAX_DISCRETE_ASSETS:
            raise IncompatibilityError(
                f"joint discrete action space 3^{self.n_assets} is too large; "
                f"limit is {MAX_DISCRETE_ASSETS} assets"
            )
        table = np.array(list(itertools.product((-1, 0, 1), repeat=self.n_assets)), dtype=np.int64)
        return table * self.k_max

    def step(self, action: ActionSpec) -> StepResult:
        if self._done:
            raise EnvError("episode is finished; call reset()")
        if not isinstance(action, ActionSpec):
            raise ModeError("step() expects an ActionSpec; use decode() for raw outputs")
        if action.mode != self.mode:
            raise ModeError(f"action mode {action.mode} does not match env mode {self.mode}")
        if action.size != self.n_assets:
            raise ShapeError(f"action has {action.size} entries, expected {self.n_assets}")

        t = self._t
        v_before = self._values[-1]
        turb = self._turbulence[t]
        gated = False
        if self.turbulence_model is not None:
            gated_action = risk_gate(action, turb, self.turbulence_model.threshold)
            gated = gated_action is not action
            action = gated_action

        prices = self._close[t]
        if self.mode == DISCRETE:
            info = self._execute_shares(action, prices)
        else:
            info = self._execute_weights(action, prices)

        self._t = t + 1
        v_after = float(self._balance + self._shares @ self._close[self._t])
        self._values.append(v_after)
        done = self._t == self.frame.n_dates - 1
        self._done = done
        reward = self._reward(v_before, v_after, done) * self.reward_scaling

        info.update(value=v_after, gated=gated, turbulence=float(turb), step_index=self._t)
        return StepResult(self._state(), reward, done, info)

    def _reward(self, v: float, v_prime: float, done: bool) -> float:
        if self.reward_kind == "delta_value":
            return reward_delta_value(v, v_prime)
        if self.reward_kind == "log_return":
            return reward_log_return(v, v_prime)
        if not done:
            return 0.0
        try:
            return reward_sharpe(np.diff(self._values), self.risk_free)
        except DegenerateSeriesError:
            return 0.0

    def _execute_shares(self, action: ActionSpec, prices: np.ndarray) -> dict:
        hs = self.cost.half_spread
        trade = action.trade
        executed = np.zeros(self.n_assets, dtype=np.int64)
        clipped = np.zeros(self.n_assets, dtype=bool)
        fees = 0.0
        spread_cost = 0.0
        balance = self._balance
        shares = self._shares

        for i in range(self.n_assets):
            want = int(shares[i]) if action.liquidate else max(-int(trade[i]), 0)
            q = min(want, int(shares[i]))
            if q < want:
                clipped[i] = True
            if q <= 0:
                continue
            px = prices[i] * (1.0 - hs)
            notional = q * px
            fee = self.cost.fee(notional)
            if balance + notional - fee < 0:
                clipped[i] = True
                continue
            balance = balance + notional - fee
            shares[i] -= q
            executed[i] -= q
            fees += fee
            spread_cost += q * prices[i] * hs

        if not action.liquidate:
            for i in range(self.n_assets):
                want = int(trade[i])
                if want <= 0:
                    continue
                px = prices[i] * (1.0 + hs)
                q = min(want, self._affordable(balance, px))
                if q < want:
                    clipped[i] = True
                if q <= 0:
                    continue
                notional = q * px
                total = notional + self.cost.fee(notional)
                balance = balance - total
                shares[i] += q
                executed[i] += q
                fees += total - notional
                spread_cost += q * prices[i] * hs

        self._balance = balance
        return dict(executed=executed, clipped=clipped, fees=fees, spread_cost=spread_cost,
                    costs=fees + spread_cost)

    def _affordable(self, balance: float, px: float) -> int:
        if self.cost.kind == "flat_fee":
            budget = balance - self.cost.flat
            q = int(budget // px) if budget > 0 else 0
        else:
            q = int(balance // (px * (1.0 + self.cost.rate)))
        # the division estimate can be off by one at exact boundaries
        while (q + 1) * px + self.cost.fee((q + 1) * px) <= balance:
            q += 1
        while q > 0:
            notional = q * px
            if notional + self.cost.fee(notional) <= balance:
                break
            q -= 1
        return max(q, 0)

    def _execute_weights(self, action: ActionSpec, prices: np.ndarray) -> dict:
        hs = self.cost.half_spread
        w = action.weights
        current = self._shares * prices
        v = float(self._balance + current.sum())
        tiny = 1e-12 * max(v, 1.0)

        def frictions(v_net: float) -> tuple[float, float]:
            delta = w * v_net - current
            buys = np.clip(delta, 0.0, None)
            sells = np.clip(-delta, 0.0, None)
            spread = hs * float((buys + sells).sum())
            if self.cost.kind == "flat_fee":
                fee = self.cost.flat * int(np.count_nonzero(np.abs(delta) > tiny))
            else:
                fee = self.cost.rate * float((buys * (1.0 + hs) + sells * (1.0 - hs)).sum())
            return fee, spread

        v_net = v
        for _ in range(200):
            fee, spread = frictions(v_net)
            nxt = v - fee - spread
            if abs(nxt - v_net) <= 1e-14 * max(v, 1.0):
                v_net = nxt
                break
            v_net = nxt
        fee, spread = frictions(v_net)

        old = self._shares.copy()
        if v_net <= 0:
            # frictions would consume the whole portfolio: hold instead
            return dict(executed=np.zeros(self.n_assets), clipped=np.ones(self.n_assets, dtype=bool),
                        fees=0.0, spread_cost=0.0, costs=0.0)
        new_shares = w * v_net / prices
        self._shares = new_shares
        self._balance = max(v_net - float(new_shares @ prices), 0.0)
        return dict(executed=new_shares - old, clipped=np.zeros(self.n_assets, dtype=bool),
                    fees=fee, spread_cost=spread, costs=fee + spread)


def make_env(
    frame: MarketFrame,
    mode: str = DISCRETE,
    initial_capital: float = 1_000_000.0,
    k_max: int = 100,
    cost: CostModel | None = None,
    turbulence: TurbulenceModel | None = None,
    reward_kind: str = "delta_value",
    **kwargs,
) -> TradingEnv:
    """Build an environment positioned before the first date of ``frame``."""
    return TradingEnv(frame, mode=mode, initial_capital=initial_capital, k_max=k_max, cost=cost,
                      turbulence=turbulence, reward_kind=reward_kind, **kwargs)
