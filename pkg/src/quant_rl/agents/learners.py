"""Deep agents: network ownership, exploration and training loops.

Every agent draws all randomness (initial weights, exploration, minibatch
sampling) from one ``np.random.default_rng(config.seed)``, so a run is
reproducible from its seed alone.
"""

from __future__ import annotations

import numpy as np

from ..errors import IncompatibilityError
from ..neural_core import Adam, Mlp, forward, init_mlp, soft_update
from ..trading_env import DISCRETE, ActionSpec, TradingEnv, TradingState
from .buffer import ReplayBuffer
from .policies import CategoricalPolicy, GaussianPolicy, SquashedGaussianPolicy
from .updates import (
    a2c_update,
    adaptive_ddpg_update,
    ddpg_update,
    dqn_update,
    gae_advantages,
    ppo_update,
    sac_update,
    td3_update,
)


def deterministic_action(algorithm: str, networks: dict, extras: dict, env: TradingEnv, obs) -> ActionSpec:
    """Noise-free action of a trained deep agent (pure function of the networks)."""
    if algorithm == "dqn":
        idx = int(np.argmax(forward(networks["q"], obs)))
        return ActionSpec.shares(env.discrete_actions()[idx], env.k_max)
    if algorithm in ("ddpg", "adaptive_ddpg", "td3"):
        return env.decode(forward(networks["actor"], obs))
    if algorithm == "sac":
        out = forward(networks["policy"], obs)
        return env.decode(np.tanh(out[: env.action_dim]))
    if algorithm in ("ppo", "a2c"):
        if extras.get("policy") == "categorical":
            idx = int(np.argmax(forward(networks["policy"], obs)))
            return ActionSpec.shares(env.discrete_actions()[idx], env.k_max)
        return env.decode(forward(networks["policy"], obs))
    raise IncompatibilityError(f"no deterministic action rule for {algorithm!r}")


class EpisodeLog:
    """Accumulates per-episode returns and terminal portfolio values."""

    def __init__(self):
        self.returns: list[float] = []
        self.final_values: list[float] = []
        self._acc = 0.0
        self._steps = 0
        self.total_steps = 0

    def add(self, reward: float, done: bool, value: float) -> None:
        self._acc += reward
        self._steps += 1
        self.total_steps += 1
        if done:
            self.returns.append(self._acc)
            self.final_values.append(value)
            self._acc = 0.0
            self._steps = 0

    def finish(self) -> dict:
        return {
            "episode_returns": list(self.returns),
            "episode_final_values": list(self.final_values),
            "partial_episode_return": self._acc if self._steps else None,
            "partial_episode_steps": self._steps,
            "total_steps": self.total_steps,
        }


class DeepAgent:
    algorithm = ""

    def __init__(self, config, env: TradingEnv):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.obs_dim = env.observation_dim
        self.action_dim = env.action_dim
        self.mode = env.mode
        self.n_updates = 0

    def _net(self, n_in: int, n_out: int, output_activation: str = "identity", output_scale: float = 1.0) -> Mlp:
        sizes = [n_in, *self.config.hidden, n_out]
        return init_mlp(sizes, self.rng, self.config.activation, output_activation, output_scale)

    def _adam(self) -> Adam:
        return Adam(self.config.lr, max_grad_norm=self.config.max_grad_norm)

    def check_env(self, env: TradingEnv) -> None:
        if env.mode != self.mode or env.observation_dim != self.obs_dim or env.action_dim != self.action_dim:
            raise IncompatibilityError(
                f"{self.algorithm} agent was built for mode={self.mode}, obs_dim={self.obs_dim}, "
                f"action_dim={self.action_dim}; env has {env.mode}, {env.observation_dim}, {env.action_dim}"
            )

    def networks(self) -> dict[str, Mlp]:
        raise NotImplementedError

    def extras(self) -> dict:
        return {}

    def load_networks(self, networks: dict[str, Mlp], extras: dict | None = None) -> None:
        """Warm start: copy weights of matching networks into this agent."""
        own = self.networks()
        for name, net in networks.items():
            if name in own:
                soft_update(own[name], net, 1.0)

    def act(self, env: TradingEnv, state: TradingState, explore: bool = False) -> ActionSpec:
        obs = env.encode(state)
        if explore:
            return self._explore(env, obs)[1]
        return deterministic_action(self.algorithm, self.networks(), self.extras(), env, obs)

    def _explore(self, env: TradingEnv, obs: np.ndarray):
        raise NotImplementedError


# --- off-policy -------------------------------------------------------------

class OffPolicyAgent(DeepAgent):
    discrete = False

    def _make_buffer(self) -> None:
        shape = () if self.discrete else (self.action_dim,)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, self.obs_dim, shape, discrete=self.discrete)

    def learn(self, env: TradingEnv, total_steps: int) -> dict:
        self.check_env(env)
        cfg = self.config
        log = EpisodeLog()
        obs = env.encode(env.reset(seed=cfg.seed))
        self._total = total_steps
        for step in range(total_steps):
            self._step = step
            record, spec = self._explore(env, obs)
            res = env.step(spec)
            obs_next = env.encode(res.next_state)
            self.buffer.add(obs, record, res.reward, obs_next, res.done)
            log.add(res.reward, res.done, res.info["value"])
            ready = len(self.buffer) >= max(cfg.batch_size, cfg.learning_starts)
            if ready and step % cfg.train_freq == 0:
                for _ in range(cfg.gradient_steps):
                    self._update()
                    self.n_updates += 1
            obs = env.encode(env.reset()) if res.done else obs_next
        return log.finish()

    def _update(self) -> None:
        raise NotImplementedError

    def _gaussian_explore(self, env: TradingEnv, mu: np.ndarray):
        sigma = self.config.exploration_noise * 2.0  # fraction of the [-1, 1] range
        a = np.clip(mu + sigma * self.rng.standard_normal(mu.shape), -1.0, 1.0)
        return a, env.decode(a)


class DQNAgent(OffPolicyAgent):
    algorithm = "dqn"
    discrete = True

    def __init__(self, config, env: TradingEnv):
        if env.mode != DISCRETE:
            raise IncompatibilityError("DQN needs the discrete_shares action mode")
        super().__init__(config, env)
        self.n_actions = len(env.discrete_actions())
        self.q = self._net(self.obs_dim, self.n_actions)
        self.q_target = self.q.copy()
        self.opt = self._adam()
        self._make_buffer()
        self._step, self._total = 0, 1

    def networks(self):
        return {"q": self.q, "q_target": self.q_target}

    def epsilon(self) -> float:
        cfg = self.config
        frac = min(self._step / max(cfg.eps_fraction * self._total, 1.0), 1.0)
        return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)

    def _explore(self, env, obs):
        if self.rng.random() < self.epsilon():
            idx = int(self.rng.integers(self.n_actions))
        else:
            idx = int(np.argmax(forward(self.q, obs)))
        return idx, ActionSpec.shares(env.discrete_actions()[idx], env.k_max)

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        _, grads = dqn_update(batch, self.q, self.q_target, cfg.gamma)
        self.opt.step(self.q.parameters(), grads.arrays())
        if cfg.target_update_interval:
            if (self.n_updates + 1) % cfg.target_update_interval == 0:
                soft_update(self.q_target, self.q, 1.0)
        else:
            soft_update(self.q_target, self.q, cfg.tau)


class DDPGAgent(OffPolicyAgent):
    algorithm = "ddpg"

    def __init__(self, config, env: TradingEnv):
        super().__init__(config, env)
        self.actor = self._net(self.obs_dim, self.action_dim, "tanh", output_scale=0.1)
        self.critic = self._net(self.obs_dim + self.action_dim, 1)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt, self.critic_opt = self._adam(), self._adam()
        self._make_buffer()

    def networks(self):
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def _explore(self, env, obs):
        return self._gaussian_explore(env, forward(self.actor, obs))

    def _apply(self, grads) -> None:
        self.critic_opt.step(self.critic.parameters(), grads["critic"].arrays())
        self.actor_opt.step(self.actor.parameters(), grads["actor"].arrays())
        soft_update(self.critic_target, self.critic, self.config.tau)
        soft_update(self.actor_target, self.actor, self.config.tau)

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        _, _, grads = ddpg_update(batch, self.actor, self.critic, self.actor_target, self.critic_target, cfg.gamma)
        self._apply(grads)


class AdaptiveDDPGAgent(DDPGAgent):
    """DDPG whose critic target is Q_targ + alpha (r - Q_targ)."""

    algorithm = "adaptive_ddpg"

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        _, _, grads = adaptive_ddpg_update(batch, self.actor, self.critic, self.critic_target, cfg.adaptive_alpha)
        self._apply(grads)


class TD3Agent(OffPolicyAgent):
    algorithm = "td3"

    def __init__(self, config, env: TradingEnv):
        super().__init__(config, env)
        self.actor = self._net(self.obs_dim, self.action_dim, "tanh", output_scale=0.1)
        self.critics = [self._net(self.obs_dim + self.action_dim, 1) for _ in range(2)]
        self.actor_target = self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = self._adam()
        self.critic_opts = [self._adam(), self._adam()]
        self._make_buffer()

    def networks(self):
        return {"actor": self.actor, "critic1": self.critics[0], "critic2": self.critics[1],
                "actor_target": self.actor_target, "critic1_target": self.critic_targets[0],
                "critic2_target": self.critic_targets[1]}

    def _explore(self, env, obs):
        return self._gaussian_explore(env, forward(self.actor, obs))

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        noise = cfg.target_noise * self.rng.standard_normal((len(batch), self.action_dim))
        _, grads = td3_update(batch, self.actor, self.critics, self.critic_targets, self.actor_target, cfg.gamma,
                              cfg.policy_delay, self.n_updates, noise, cfg.noise_clip)
        for k in range(2):
            self.critic_opts[k].step(self.critics[k].parameters(), grads[f"critic{k + 1}"].arrays())
        if "actor" in grads:
            self.actor_opt.step(self.actor.parameters(), grads["actor"].arrays())
            soft_update(self.actor_target, self.actor, cfg.tau)
            for t, c in zip(self.critic_targets, self.critics):
                soft_update(t, c, cfg.tau)


class SACAgent(OffPolicyAgent):
    algorithm = "sac"

    def __init__(self, config, env: TradingEnv):
        super().__init__(config, env)
        net = self._net(self.obs_dim, 2 * self.action_dim, output_scale=0.1)
        self.policy = SquashedGaussianPolicy(net, self.action_dim)
        self.critics = [self._net(self.obs_dim + self.action_dim, 1) for _ in range(2)]
        self.critic_targets = [c.copy() for c in self.critics]
        self.policy_opt = self._adam()
        self.critic_opts = [self._adam(), self._adam()]
        self._make_buffer()

    def networks(self):
        return {"policy": self.policy.net, "critic1": self.critics[0], "critic2": self.critics[1],
                "critic1_target": self.critic_targets[0], "critic2_target": self.critic_targets[1]}

    def _explore(self, env, obs):
        a = self.policy.sample(obs, self.rng)
        return a, env.decode(a)

    def _update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        shape = (len(batch), self.action_dim)
        noise_next = self.rng.standard_normal(shape)
        noise = self.rng.standard_normal(shape)
        _, grads = sac_update(batch, self.policy, self.critics, self.critic_targets, cfg.entropy_alpha,
                              cfg.gamma, noise_next, noise)
        for k in range(2):
            self.critic_opts[k].step(self.critics[k].parameters(), grads[f"critic{k + 1}"].arrays())
        self.policy_opt.step(self.policy.parameters(), grads["policy"].arrays())
        for t, c in zip(self.critic_targets, self.critics):
            soft_update(t, c, cfg.tau)


# --- on-policy --------------------------------------------------------------

class OnPolicyAgent(DeepAgent):
    default_n_steps = 256

    def __init__(self, config, env: TradingEnv):
        super().__init__(config, env)
        if config.policy == "categorical":
            if env.mode != DISCRETE:
                raise IncompatibilityError("a categorical policy needs the discrete_shares action mode")
            n_actions = len(env.discrete_actions())
            self.policy = CategoricalPolicy(self._net(self.obs_dim, n_actions, "softmax", output_scale=0.01))
        else:
            net = self._net(self.obs_dim, self.action_dim, output_scale=0.01)
            self.policy = GaussianPolicy(net, np.full(self.action_dim, float(config.init_log_std)))
        self.value = self._net(self.obs_dim, 1)
        self.policy_opt, self.value_opt = self._adam(), self._adam()
        self.n_steps = config.n_steps or self.default_n_steps

    def networks(self):
        return {"policy": self.policy.net, "value": self.value}

    def extras(self):
        extras = {"policy": self.policy.kind}
        if self.policy.log_std is not None:
            extras["log_std"] = self.policy.log_std.tolist()
        return extras

    def load_networks(self, networks, extras=None):
        super().load_networks(networks, extras)
        if extras and "log_std" in extras and self.policy.log_std is not None:
            self.policy.log_std[...] = np.asarray(extras["log_std"], dtype=float)

    def _explore(self, env, obs):
        if self.policy.kind == "categorical":
            idx = self.policy.sample(obs, self.rng)
            return idx, ActionSpec.shares(env.discrete_actions()[idx], env.k_max)
        a = self.policy.sample(obs, self.rng)
        return a, env.decode(a)

    def learn(self, env: TradingEnv, total_steps: int) -> dict:
        self.check_env(env)
        log = EpisodeLog()
        obs = env.encode(env.reset(seed=self.config.seed))
        step = 0
        while step < total_steps:
            n = min(self.n_steps, total_steps - step)
            s, a, r, d = [], [], [], []
            for _ in range(n):
                record, spec = self._explore(env, obs)
                res = env.step(spec)
                s.append(obs)
                a.append(record)
                r.append(res.reward)
                d.append(res.done)
                log.add(res.reward, res.done, res.info["value"])
                obs = env.encode(env.reset()) if res.done else env.encode(res.next_state)
            last_value = 0.0 if d[-1] else float(forward(self.value, obs)[0])
            self._update(np.array(s), np.array(a), np.array(r, dtype=float), np.array(d, dtype=bool), last_value)
            self.n_updates += 1
            step += n
        return log.finish()

    def _apply(self, grads) -> None:
        self.policy_opt.step(self.policy.parameters(), grads["policy"])
        self.value_opt.step(self.value.parameters(), grads["value"].arrays())


class PPOAgent(OnPolicyAgent):
    algorithm = "ppo"

    def _update(self, s, a, r, d, last_value):
        cfg = self.config
        values = forward(self.value, s)[:, 0]
        adv, returns = gae_advantages(r, values, d, last_value, cfg.gamma, cfg.gae_lambda)
        if cfg.normalize_advantages and len(adv) > 1 and adv.std() > 1e-12:
            adv = (adv - adv.mean()) / adv.std()
        old_logp = self.policy.log_prob(s, a)
        n = len(r)
        mb = min(cfg.batch_size, n)
        for _ in range(cfg.n_epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                rollout = {"s": s[idx], "a": a[idx], "old_logp": old_logp[idx], "adv": adv[idx],
                           "returns": returns[idx]}
                _, grads = ppo_update(rollout, self.policy, self.value, cfg.clip_eps, cfg.vf_coef)
                self._apply(grads)


class A2CAgent(OnPolicyAgent):
    algorithm = "a2c"
    default_n_steps = 5

    def _update(self, s, a, r, d, last_value):
        traj = {"s": s, "a": a, "rewards": r, "dones": d, "last_value": last_value}
        _, grads = a2c_update(traj, self.policy, self.value, self.config.gamma, self.config.vf_coef)
        self._apply(grads)


AGENT_CLASSES = {
    "dqn": DQNAgent,
    "ddpg": DDPGAgent,
    "adaptive_ddpg": AdaptiveDDPGAgent,
    "td3": TD3Agent,
    "sac": SACAgent,
    "ppo": PPOAgent,
    "a2c": A2CAgent,
}
