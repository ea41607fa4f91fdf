"""Dynamic-programming planners for finite MDPs.

Used as exact benchmarks: on a small market the trading problem can be
written as a finite MDP over (date, position units) and solved exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import DivergenceError, DomainError, IncompatibilityError, NumericError, ShapeError
from ..trading_env import DISCRETE, ActionSpec, TradingEnv, TradingState


@dataclass(frozen=True)
class TabularMdp:
    """``transition[s, a, s2]`` = T(s2 | s, a); ``reward[s, a, s2]`` = r(s, a, s2)."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ShapeError(f"transition must have shape (S, A, S), got {t.shape}")
        r = np.asarray(self.reward, dtype=float)
        if r.shape == t.shape[:2]:
            r = np.repeat(r[:, :, None], t.shape[2], axis=2)
        if r.shape != t.shape:
            raise ShapeError(f"reward shape {r.shape} does not match transition {t.shape}")
        if np.any(t < 0) or not np.allclose(t.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise DomainError("each T(.|s,a) must be a probability distribution")
        if not 0.0 <= self.gamma:
            raise DomainError("gamma must be >= 0")
        if self.gamma >= 1.0:
            raise DivergenceError(f"gamma={self.gamma} >= 1: discounted values diverge")
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """E[r | s, a] as an (S, A) array."""
        return (self.transition * self.reward).sum(axis=2)


def q_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Q(s,a) = sum_s2 T(s2|s,a) (r(s,a,s2) + gamma V(s2))."""
    return mdp.expected_reward() + mdp.gamma * mdp.transition @ v


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Iterate the Bellman optimality operator until the sup-norm residual is <= tol.

    Returns ``(V, policy)`` with the policy greedy with respect to V.
    """
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = q_values(mdp, v)
        v_new = q.max(axis=1)
        residual = np.abs(v_new - v).max()
        v = v_new
        if residual <= tol:
            break
    else:
        raise NumericError(f"value iteration did not converge in {max_iter} sweeps")
    return v, q_values(mdp, v).argmax(axis=1)


def evaluate_policy(mdp: TabularMdp, policy) -> np.ndarray:
    """Exact V^pi from the linear system (I - gamma P_pi) V = r_pi."""
    policy = np.asarray(policy, dtype=int)
    idx = np.arange(mdp.n_states)
    p_pi = mdp.transition[idx, policy]
    r_pi = mdp.expected_reward()[idx, policy]
    try:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular policy-evaluation system") from exc


def policy_iteration(mdp: TabularMdp, seed: int | None = 0, initial_policy=None, max_iter: int = 10_000,
                     return_info: bool = False):
    """Alternate exact evaluation and greedy improvement until the policy is stable.

    Starts from a random policy drawn with ``seed`` unless ``initial_policy``
    is given. An action only replaces the current one when it is strictly
    better, which prevents cycling between tied actions.
    """
    if initial_policy is None:
        policy = np.random.default_rng(seed).integers(mdp.n_actions, size=mdp.n_states)
    else:
        policy = np.asarray(initial_policy, dtype=int).copy()
    idx = np.arange(mdp.n_states)
    for it in range(1, max_iter + 1):
        v = evaluate_policy(mdp, policy)
        q = q_values(mdp, v)
        best = q.argmax(axis=1)
        improve = q[idx, best] > q[idx, policy] + 1e-12 * np.maximum(1.0, np.abs(q[idx, policy]))
        if not improve.any():
            break
        policy = np.where(improve, best, policy)
    else:
        raise NumericError(f"policy iteration did not stabilize in {max_iter} rounds")
    if return_info:
        return policy, {"values": v, "iterations": it}
    return policy


# --- trading environment as a finite MDP ------------------------------------

@dataclass
class TradingMdp:
    mdp: TabularMdp
    unit_levels: int
    n_dates: int
    n_assets: int
    moves: np.ndarray  # (A, n) entries in {-1, 0, 1}

    def state_index(self, t: int, units) -> int:
        base = self.unit_levels + 1
        code = 0
        for u in units:
            code = code * base + int(u)
        return t * base ** self.n_assets + code


def env_to_mdp(env: TradingEnv, gamma: float, max_units: int = 2) -> TradingMdp:
    """Finite MDP over (date, holdings in units of k_max) for a discrete-mode env.

    Rewards are the env's delta-value rewards (position P&L minus spread and
    fees). Cash is not tracked, so affordability is assumed.
    """
    if env.mode != DISCRETE:
        raise IncompatibilityError("tabular planning needs a discrete_shares environment")
    if env.reward_kind != "delta_value":
        raise IncompatibilityError("tabular planning supports the delta_value reward only")
    n, T, U, k = env.n_assets, env.frame.n_dates, int(max_units), env.k_max
    n_pos = (U + 1) ** n
    if T * n_pos * 3 ** n > 2_000_000:
        raise IncompatibilityError("market too large for exact tabular planning")
    moves = np.array(list(itertools.product((-1, 0, 1), repeat=n)), dtype=int)
    positions = np.array(list(itertools.product(range(U + 1), repeat=n)), dtype=int)
    S, A = T * n_pos, len(moves)
    trans = np.zeros((S, A, S))
    rew = np.zeros((S, A, S))
    close = env.frame.close
    hs = env.cost.half_spread
    helper = TradingMdp(None, U, T, n, moves)  # type: ignore[arg-type]
    for t in range(T):
        for p_idx, units in enumerate(positions):
            s = t * n_pos + p_idx
            if t == T - 1:
                trans[s, :, s] = 1.0
                continue
            for a, move in enumerate(moves):
                new = np.clip(units + move, 0, U)
                traded = (new - units) * k
                cost = 0.0
                for i in range(n):
                    if traded[i] != 0:
                        q = abs(traded[i])
                        px = close[t, i] * (1 + hs if traded[i] > 0 else 1 - hs)
                        cost += q * close[t, i] * hs + env.cost.fee(q * px)
                pnl = float((new * k) @ (close[t + 1] - close[t]))
                s2 = helper.state_index(t + 1, new)
                trans[s, a, s2] = 1.0
                rew[s, a, s2] = (pnl - cost) * env.reward_scaling
    helper.mdp = TabularMdp(trans, rew, gamma)
    return helper


class TabularAgent:
    """Plans on the finite trading MDP and acts from the resulting table."""

    def __init__(self, algorithm: str, config, env: TradingEnv, max_units: int = 2):
        if algorithm not in ("value_iteration", "policy_iteration"):
            raise ValueError(algorithm)
        if env.mode != DISCRETE:
            raise IncompatibilityError(f"{algorithm} needs a discrete_shares environment")
        self.algorithm = algorithm
        self.config = config
        self.max_units = max_units
        self.k_max = env.k_max
        self.n_assets = env.n_assets
        self.policy: np.ndarray | None = None
        self.values: np.ndarray | None = None
        self.layout: TradingMdp | None = None

    def fit(self, env: TradingEnv) -> None:
        layout = env_to_mdp(env, self.config.gamma, self.max_units)
        if self.algorithm == "value_iteration":
            v, pi = value_iteration(layout.mdp)
        else:
            pi, info = policy_iteration(layout.mdp, seed=self.config.seed, return_info=True)
            v = info["values"]
        self.layout, self.policy, self.values = layout, pi, v

    def act(self, env: TradingEnv, state: TradingState, explore: bool = False) -> ActionSpec:
        if self.policy is None:
            raise RuntimeError("agent has not been trained")
        lay = self.layout
        t = min(state.step_index, lay.n_dates - 1)
        units = np.clip(np.rint(np.asarray(state.shares) / self.k_max), 0, self.max_units).astype(int)
        move = lay.moves[self.policy[lay.state_index(t, units)]]
        new = np.clip(units + move, 0, self.max_units)
        # trade relative to the actual holdings so the position tracks the plan
        trade = np.clip(new * self.k_max - np.asarray(state.shares), -self.k_max, self.k_max)
        return ActionSpec.shares(trade, self.k_max)
