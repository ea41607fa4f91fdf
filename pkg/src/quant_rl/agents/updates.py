"""Loss functions and their parameter gradients for every deep agent.

Each update is a pure function of a batch and the networks involved. It
returns the loss value(s) and gradients; applying them with an optimizer
and syncing target networks is left to the caller. Target values are
treated as constants (no gradient flows through target networks).
"""

from __future__ import annotations

import numpy as np

from ..errors import ModeError, NumericError, ShapeError
from ..neural_core import GradientSet, Mlp, backward, forward
from .buffer import Batch
from .policies import CategoricalPolicy, GaussianPolicy, SquashedGaussianPolicy


def _sa(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.hstack([np.atleast_2d(s), np.atleast_2d(a)])


def _not_done(batch: Batch) -> np.ndarray:
    return 1.0 - np.asarray(batch.done, dtype=float)


def critic_regression(critic: Mlp, s, a, y) -> tuple[float, GradientSet]:
    """Mean squared error of Q(s, a) against fixed targets ``y``."""
    x = _sa(s, a)
    q = forward(critic, x)[:, 0]
    err = q - y
    loss = float(np.mean(err * err))
    grads = backward(critic, x, (2.0 / len(y)) * err[:, None])
    return loss, grads


def deterministic_actor_loss(actor: Mlp, critic: Mlp, s) -> tuple[float, GradientSet]:
    """Loss -mean Q(s, mu(s)) and its gradient w.r.t. the actor parameters."""
    s = np.atleast_2d(s)
    a = forward(actor, s)
    x = _sa(s, a)
    q = forward(critic, x)[:, 0]
    n = len(q)
    _, dx = backward(critic, x, np.full((n, 1), -1.0 / n), return_input_grad=True)
    d_a = dx[:, s.shape[1]:]
    return float(-q.mean()), backward(actor, s, d_a)


# --- DQN --------------------------------------------------------------------

def dqn_target(batch: Batch, q_target: Mlp, gamma: float) -> np.ndarray:
    q_next = forward(q_target, batch.s_next).max(axis=1)
    return batch.r + gamma * _not_done(batch) * q_next


def dqn_update(batch: Batch, q_net: Mlp, q_target: Mlp, gamma: float) -> tuple[float, GradientSet]:
    """Mean squared TD error (r + gamma max_a' Q_targ(s', a') - Q(s, a))^2."""
    a = np.asarray(batch.a)
    if a.ndim != 1 or not np.issubdtype(a.dtype, np.integer):
        raise ModeError("DQN needs integer action indices (discrete action space)")
    y = dqn_target(batch, q_target, gamma)
    q = forward(q_net, batch.s)
    rows = np.arange(len(a))
    err = q[rows, a] - y
    up = np.zeros_like(q)
    up[rows, a] = 2.0 * err / len(a)
    return float(np.mean(err * err)), backward(q_net, batch.s, up)


# --- DDPG and Adaptive DDPG ---------------------------------------------------

def ddpg_target(batch: Batch, actor_target: Mlp, critic_target: Mlp, gamma: float) -> np.ndarray:
    a2 = forward(actor_target, batch.s_next)
    q2 = forward(critic_target, _sa(batch.s_next, a2))[:, 0]
    return batch.r + gamma * _not_done(batch) * q2


def ddpg_update(batch: Batch, actor: Mlp, critic: Mlp, actor_target: Mlp, critic_target: Mlp,
                gamma: float):
    """Critic loss (1/N) sum (y_i - Q(s_i, a_i))^2 with y_i = r_i + gamma Q'(s'_i, mu'(s'_i)),
    and actor loss -mean Q(s, mu(s)).

    Returns ``(critic_loss, actor_loss, {"critic": ..., "actor": ...})``.
    """
    if np.asarray(batch.a).ndim != 2:
        raise ShapeError("DDPG needs a (batch, action_dim) array of continuous actions")
    y = ddpg_target(batch, actor_target, critic_target, gamma)
    c_loss, c_grads = critic_regression(critic, batch.s, batch.a, y)
    a_loss, a_grads = deterministic_actor_loss(actor, critic, batch.s)
    return c_loss, a_loss, {"critic": c_grads, "actor": a_grads}


def adaptive_ddpg_q_step(q, r, alpha: float):
    """Q <- Q + alpha * (r - Q): the prediction-error update with delta = r - Q."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    return q + alpha * (r - q)


def adaptive_ddpg_target(batch: Batch, critic_target: Mlp, alpha: float) -> np.ndarray:
    q = forward(critic_target, _sa(batch.s, batch.a))[:, 0]
    return adaptive_ddpg_q_step(q, batch.r, alpha)


def adaptive_ddpg_update(batch: Batch, actor: Mlp, critic: Mlp, critic_target: Mlp, alpha: float):
    """DDPG with the bootstrap target replaced by the adaptive Q step on the target critic."""
    if np.asarray(batch.a).ndim != 2:
        raise ShapeError("Adaptive DDPG needs continuous actions")
    y = adaptive_ddpg_target(batch, critic_target, alpha)
    c_loss, c_grads = critic_regression(critic, batch.s, batch.a, y)
    a_loss, a_grads = deterministic_actor_loss(actor, critic, batch.s)
    return c_loss, a_loss, {"critic": c_grads, "actor": a_grads}


# --- TD3 ----------------------------------------------------------------------

def td3_target(batch: Batch, actor_target: Mlp, critic_targets, gamma: float, noise=None,
               noise_clip: float = 0.5) -> np.ndarray:
    """y = r + gamma (1 - d) min_i Q_targ_i(s', a'), a' = clip(mu'(s') + clip(noise))."""
    a2 = forward(actor_target, batch.s_next)
    if noise is not None:
        a2 = np.clip(a2 + np.clip(noise, -noise_clip, noise_clip), -1.0, 1.0)
    x2 = _sa(batch.s_next, a2)
    q_min = np.minimum(forward(critic_targets[0], x2)[:, 0], forward(critic_targets[1], x2)[:, 0])
    return batch.r + gamma * _not_done(batch) * q_min


def td3_update(batch: Batch, actor: Mlp, critics, critic_targets, actor_target: Mlp, gamma: float,
               policy_delay: int = 2, step: int = 0, noise=None, noise_clip: float = 0.5):
    """Both critics regress to the shared min-of-twins target; the actor is
    updated (via critic 1) only when ``step`` is a multiple of ``policy_delay``.

    Returns ``(losses, grads)`` dicts keyed by critic1, critic2 and, on actor
    steps, actor.
    """
    y = td3_target(batch, actor_target, critic_targets, gamma, noise, noise_clip)
    l1, g1 = critic_regression(critics[0], batch.s, batch.a, y)
    l2, g2 = critic_regression(critics[1], batch.s, batch.a, y)
    losses = {"critic1": l1, "critic2": l2}
    grads = {"critic1": g1, "critic2": g2}
    if step % policy_delay == 0:
        losses["actor"], grads["actor"] = deterministic_actor_loss(actor, critics[0], batch.s)
    return losses, grads


# --- SAC ----------------------------------------------------------------------

def sac_target(batch: Batch, policy: SquashedGaussianPolicy, critic_targets, alpha: float, gamma: float,
               noise_next: np.ndarray) -> np.ndarray:
    """y = r + gamma (1 - d) (min_j Q_targ_j(s', a') - alpha log pi(a'|s')), a' ~ pi(.|s')."""
    a2, logp2 = policy.sample_with_noise(batch.s_next, noise_next)
    x2 = _sa(batch.s_next, a2)
    q_min = np.minimum(forward(critic_targets[0], x2)[:, 0], forward(critic_targets[1], x2)[:, 0])
    return batch.r + gamma * _not_done(batch) * (q_min - alpha * logp2)


def sac_policy_loss(batch: Batch, policy: SquashedGaussianPolicy, critics, alpha: float,
                    noise: np.ndarray) -> tuple[float, GradientSet]:
    """mean(alpha log pi(a~|s) - min_j Q_j(s, a~)) with reparameterized a~."""
    s = np.atleast_2d(batch.s)
    a, logp = policy.sample_with_noise(s, noise)
    x = _sa(s, a)
    q1 = forward(critics[0], x)[:, 0]
    q2 = forward(critics[1], x)[:, 0]
    use_first = q1 <= q2
    n = len(q1)
    d_q = np.zeros((n, a.shape[1]))
    for k, mask in ((0, use_first), (1, ~use_first)):
        if mask.any():
            up = np.where(mask, -1.0 / n, 0.0)[:, None]
            _, dx = backward(critics[k], x, up, return_input_grad=True)
            d_q += dx[:, s.shape[1]:]
    loss = float(np.mean(alpha * logp - np.minimum(q1, q2)))
    grads = policy.reparam_grads(s, noise, d_q, np.full(n, alpha / n))
    return loss, grads


def sac_update(batch: Batch, policy: SquashedGaussianPolicy, critics, critic_targets, alpha: float,
               gamma: float, noise_next: np.ndarray, noise: np.ndarray):
    """Twin-critic regression to the entropy-regularized target plus the policy loss.

    ``noise_next`` and ``noise`` are standard-normal draws of shape
    (batch, action_dim) for the target and policy samples.
    """
    y = sac_target(batch, policy, critic_targets, alpha, gamma, noise_next)
    l1, g1 = critic_regression(critics[0], batch.s, batch.a, y)
    l2, g2 = critic_regression(critics[1], batch.s, batch.a, y)
    lp, gp = sac_policy_loss(batch, policy, critics, alpha, noise)
    return ({"critic1": l1, "critic2": l2, "policy": lp},
            {"critic1": g1, "critic2": g2, "policy": gp})


# --- PPO ----------------------------------------------------------------------

def ppo_clip_bound(eps: float, advantage):
    """g(eps, A) = (1 + eps) A for A >= 0, (1 - eps) A for A < 0."""
    advantage = np.asarray(advantage, dtype=float)
    return np.where(advantage >= 0, (1.0 + eps) * advantage, (1.0 - eps) * advantage)


def ppo_objective(ratio, advantage, eps: float) -> np.ndarray:
    """Elementwise min(ratio * A, g(eps, A))."""
    return np.minimum(np.asarray(ratio) * advantage, ppo_clip_bound(eps, advantage))


def value_regression(value_net: Mlp, s, returns, coef: float) -> tuple[float, GradientSet]:
    v = forward(value_net, np.atleast_2d(s))[:, 0]
    err = v - returns
    loss = coef * float(np.mean(err * err))
    return loss, backward(value_net, np.atleast_2d(s), (2.0 * coef / len(err)) * err[:, None])


def ppo_update(rollout: dict, policy: GaussianPolicy | CategoricalPolicy, value_net: Mlp, clip_eps: float,
               vf_coef: float = 0.5):
    """Clipped surrogate loss -mean(min(r A, g(eps, A))) plus value regression.

    ``rollout`` holds arrays ``s``, ``a``, ``old_logp``, ``adv`` and
    ``returns``. Returns ``(loss, {"policy": [arrays...], "value": GradientSet})``
    where the policy gradient list aligns with ``policy.parameters()``.
    """
    old = np.asarray(rollout["old_logp"], dtype=float)
    if not np.all(np.isfinite(old)):
        raise NumericError("old-policy probability is zero for some sampled action")
    s, a, adv = rollout["s"], rollout["a"], np.asarray(rollout["adv"], dtype=float)
    logp = policy.log_prob(s, a)
    ratio = np.exp(logp - old)
    surr = ratio * adv
    bound = ppo_clip_bound(clip_eps, adv)
    obj = np.minimum(surr, bound)
    n = len(adv)
    active = surr < bound
    p_grads = policy.log_prob_grads(s, a, np.where(active, -ratio * adv / n, 0.0))
    v_loss, v_grads = value_regression(value_net, s, rollout["returns"], vf_coef)
    loss = float(-obj.mean()) + v_loss
    return loss, {"policy": p_grads, "value": v_grads}


def gae_advantages(rewards, values, dones, last_value: float, gamma: float, lam: float):
    """Generalized advantage estimates and the matching return targets."""
    rewards = np.asarray(rewards, dtype=float)
    n = len(rewards)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - float(dones[t])
        next_v = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    return adv, adv + np.asarray(values, dtype=float)


# --- A2C ----------------------------------------------------------------------

def discounted_returns(rewards, dones, last_value: float, gamma: float) -> np.ndarray:
    """n-step bootstrapped returns R_t = r_t + gamma R_{t+1}, cut at episode ends."""
    out = np.zeros(len(rewards))
    acc = last_value
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc * (1.0 - float(dones[t]))
        out[t] = acc
    return out


def a2c_update(trajectory: dict, policy: GaussianPolicy | CategoricalPolicy, value_net: Mlp, gamma: float,
               vf_coef: float = 0.5):
    """Advantage policy gradient with a learned state-value baseline.

    ``trajectory`` holds ``s``, ``a``, ``rewards``, ``dones`` and
    ``last_value`` (bootstrap for the state after the final step). The loss
    is -mean(log pi(a|s) A) + vf_coef * mean((V(s) - R)^2) with A = R - V(s)
    held constant in the policy term.
    """
    s = np.atleast_2d(trajectory["s"])
    returns = discounted_returns(trajectory["rewards"], trajectory["dones"], trajectory["last_value"], gamma)
    v = forward(value_net, s)[:, 0]
    adv = returns - v
    logp = policy.log_prob(s, trajectory["a"])
    n = len(adv)
    p_loss = float(-(logp * adv).mean())
    p_grads = policy.log_prob_grads(s, trajectory["a"], -adv / n)
    v_loss, v_grads = value_regression(value_net, s, returns, vf_coef)
    return p_loss + v_loss, {"policy": p_grads, "value": v_grads, "advantages": adv, "returns": returns}
