"""Stochastic policy heads with analytic log-probability gradients."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from ..neural_core import GradientSet, Mlp, backward, forward

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class GaussianPolicy:
    """Diagonal Gaussian around a network mean with a state-independent log std."""

    kind = "gaussian"

    def __init__(self, net: Mlp, log_std: np.ndarray):
        self.net = net
        self.log_std = np.asarray(log_std, dtype=float)

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters() + [self.log_std]

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.net.copy(), self.log_std.copy())

    def mean(self, s) -> np.ndarray:
        return forward(self.net, s)

    def sample(self, s, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(s)
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def mode(self, s) -> np.ndarray:
        return self.mean(s)

    def log_prob(self, s, a) -> np.ndarray:
        mu = forward(self.net, np.atleast_2d(s))
        z = (np.atleast_2d(a) - mu) / np.exp(self.log_std)
        return (-0.5 * z * z - self.log_std - 0.5 * LOG_2PI).sum(axis=1)

    def log_prob_grads(self, s, a, coef) -> list[np.ndarray]:
        """Gradient of sum_i coef_i * log pi(a_i | s_i), aligned with parameters()."""
        s = np.atleast_2d(s)
        mu = forward(self.net, s)
        std = np.exp(self.log_std)
        z = (np.atleast_2d(a) - mu) / std
        coef = np.asarray(coef, dtype=float)[:, None]
        g_net = backward(self.net, s, coef * z / std)
        g_log_std = (coef * (z * z - 1.0)).sum(axis=0)
        return g_net.arrays() + [g_log_std]


class CategoricalPolicy:
    """Softmax distribution over a finite action table."""

    kind = "categorical"

    def __init__(self, net: Mlp):
        if net.output_activation != "softmax":
            raise ShapeError("categorical policy needs a softmax output head")
        self.net = net
        self.log_std = None

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()

    def copy(self) -> "CategoricalPolicy":
        return CategoricalPolicy(self.net.copy())

    def probs(self, s) -> np.ndarray:
        return forward(self.net, s)

    def sample(self, s, rng: np.random.Generator) -> int:
        p = self.probs(s)
        return int(rng.choice(len(p), p=p / p.sum()))

    def mode(self, s) -> int:
        return int(np.argmax(self.probs(s)))

    def log_prob(self, s, a) -> np.ndarray:
        p = forward(self.net, np.atleast_2d(s))
        a = np.asarray(a, dtype=int).reshape(-1)
        with np.errstate(divide="ignore"):
            return np.log(p[np.arange(len(a)), a])

    def log_prob_grads(self, s, a, coef) -> list[np.ndarray]:
        s = np.atleast_2d(s)
        p = forward(self.net, s)
        a = np.asarray(a, dtype=int).reshape(-1)
        rows = np.arange(len(a))
        up = np.zeros_like(p)
        up[rows, a] = np.asarray(coef, dtype=float) / p[rows, a]
        return backward(self.net, s, up).arrays()


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class SquashedGaussianPolicy:
    """tanh(N(mu(s), sigma(s))) policy; the network emits [mu, log_std]."""

    kind = "squashed_gaussian"

    def __init__(self, net: Mlp, action_dim: int):
        if net.n_outputs != 2 * action_dim:
            raise ShapeError("squashed Gaussian net must output 2 * action_dim values")
        self.net = net
        self.action_dim = action_dim
        self.log_std = None

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()

    def copy(self) -> "SquashedGaussianPolicy":
        return SquashedGaussianPolicy(self.net.copy(), self.action_dim)

    def _split(self, s):
        out = forward(self.net, np.atleast_2d(s))
        mu, raw = out[:, : self.action_dim], out[:, self.action_dim:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw

    def mode(self, s) -> np.ndarray:
        mu, _, _ = self._split(s)
        return np.tanh(mu[0]) if np.ndim(s) == 1 else np.tanh(mu)

    def sample_with_noise(self, s, noise: np.ndarray):
        """Reparameterized sample a = tanh(mu + std * noise) and its log-probability."""
        mu, log_std, _ = self._split(s)
        u = mu + np.exp(log_std) * noise
        a = np.tanh(u)
        logp = (-0.5 * noise * noise - log_std - 0.5 * LOG_2PI - _log1m_tanh_sq(u)).sum(axis=1)
        return a, logp

    def sample(self, s, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((1, self.action_dim))
        return self.sample_with_noise(s, noise)[0][0]

    def reparam_grads(self, s, noise, d_loss_d_a, d_loss_d_logp) -> GradientSet:
        """Chain d(loss)/d(action) and d(loss)/d(log pi) back into the network.

        ``d_loss_d_a`` is (B, action_dim); ``d_loss_d_logp`` is (B,).
        """
        s = np.atleast_2d(s)
        mu, log_std, raw = self._split(s)
        std = np.exp(log_std)
        u = mu + std * noise
        a = np.tanh(u)
        c = np.asarray(d_loss_d_logp, dtype=float)[:, None]
        # d logp / du = 2 tanh(u); d logp / d log_std (direct) = -1
        d_u = d_loss_d_a * (1.0 - a * a) + c * 2.0 * a
        d_mu = d_u
        d_log_std = (d_u * std * noise - c) * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
        return backward(self.net, s, np.hstack([d_mu, d_log_std]))
