"""Independent reference implementations used as test oracles.

Nothing here calls the code under test except network ``forward`` passes,
which are themselves gradient-checked separately.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from quant_rl.neural_core import Mlp, forward

# --- metrics --------------------------------------------------------------------


def brute_cumulative_return(v):
    return (v[-1] - v[0]) / v[0]


def brute_annualized_return(v, ppy):
    years = (len(v) - 1) / ppy
    try:
        return math.exp(math.log(v[-1] / v[0]) / years) - 1.0
    except OverflowError:
        return math.inf


def brute_returns(v):
    return [v[i] / v[i - 1] - 1.0 for i in range(1, len(v))]


def brute_std(xs):
    m = math.fsum(xs) / len(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def brute_annualized_std(v, ppy):
    return brute_std(brute_returns(v)) * math.sqrt(ppy)


def brute_sharpe(v, ppy, rf=0.0):
    r = brute_returns(v)
    return (math.fsum(r) / len(r) - rf) / brute_std(r) * math.sqrt(ppy)


def brute_max_drawdown(v):
    """All (peak, trough) pairs with peak before trough."""
    worst = 0.0
    for i in range(len(v)):
        for j in range(i, len(v)):
            worst = min(worst, (v[j] - v[i]) / v[i])
    return worst


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300)


# --- quadratic forms ------------------------------------------------------------


def loop_quadratic_form(d, m):
    total = 0.0
    n = len(d)
    for i in range(n):
        for j in range(n):
            total += d[i] * m[i][j] * d[j]
    return total


def random_psd(rng, n, rank=None):
    a = rng.normal(size=(n, rank or n))
    return a @ a.T + 1e-3 * np.eye(n)


# --- tabular MDPs ---------------------------------------------------------------


def enumerate_policy_values(transition, reward, gamma):
    """Optimal state values by evaluating every deterministic policy."""
    s, a = transition.shape[:2]
    r_sa = (transition * reward).sum(axis=2) if reward.ndim == 3 else reward
    best = np.full(s, -np.inf)
    for policy in itertools.product(range(a), repeat=s):
        p = np.array([transition[i, policy[i]] for i in range(s)])
        r = np.array([r_sa[i, policy[i]] for i in range(s)])
        v = np.linalg.solve(np.eye(s) - gamma * p, r)
        best = np.maximum(best, v)
    return best


def random_mdp(rng, n_states=4, n_actions=2):
    t = rng.random((n_states, n_actions, n_states))
    t /= t.sum(axis=2, keepdims=True)
    r = rng.normal(size=(n_states, n_actions, n_states))
    gamma = float(rng.uniform(0.5, 0.95))
    return t, r, gamma


# --- trading ----------------------------------------------------------------------


def alternating_market_optimum(prices, capital, k_max):
    """Best final value over every {-1,0,1}^n * k_max action sequence.

    Frictionless integer-share market: sells first (clipped to holdings),
    then buys (clipped to affordable). Forward search over reachable states,
    merging identical (cash, holdings) states at each date.
    """
    prices = np.asarray(prices, dtype=np.int64)
    T, n = prices.shape
    moves = [np.array(m) * k_max for m in itertools.product((-1, 0, 1), repeat=n)]

    def execute(state, trade, px):
        bal, sh = state[0], list(state[1:])
        for i in range(n):
            q = min(max(-trade[i], 0), sh[i])
            bal += q * px[i]
            sh[i] -= q
        for i in range(n):
            if trade[i] > 0:
                q = min(trade[i], bal // px[i])
                bal -= q * px[i]
                sh[i] += q
        return (bal, *sh)

    states = {(int(capital),) + (0,) * n}
    for t in range(T - 1):
        px = [int(p) for p in prices[t]]
        states = {execute(s, [int(x) for x in m], px) for s in states for m in moves}
    last = [int(p) for p in prices[-1]]
    return max(s[0] + sum(s[1 + i] * last[i] for i in range(n)) for s in states)


# --- gradients ----------------------------------------------------------------------


def numeric_grad(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of every array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def preactivation_margin(net: Mlp, x) -> float:
    """Smallest |pre-activation| at any relu unit; kinks closer than the FD step break the check."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    margin = np.inf
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if k < len(net.weights) - 1:
            if net.activations[k] == "relu":
                margin = min(margin, float(np.abs(z).min()))
                h = np.maximum(z, 0.0)
            else:
                h = np.tanh(z)
    return margin


def gaussian_logp(mu, log_std, a):
    std = np.exp(log_std)
    return (-0.5 * ((a - mu) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(axis=1)


def squashed_logp(mu, log_std, noise):
    u = mu + np.exp(log_std) * noise
    base = (-0.5 * noise ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(axis=1)
    return np.tanh(u), base - np.log(1.0 - np.tanh(u) ** 2).sum(axis=1)


def q_of(net, s, a):
    return forward(net, np.hstack([s, a]))[:, 0]


def pairs_max_drawdown(v):
    """Vectorized form of the all-pairs scan: row i holds (v[j] - v[i]) / v[i] for j >= i."""
    v = np.asarray(v, dtype=float)
    worst = 0.0
    for i in range(len(v)):
        worst = min(worst, float(((v[i:] - v[i]) / v[i]).min()))
    return worst
