"""Uniform get-model / train-model entry points over every algorithm."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, IncompatibilityError, TooShortError, UnsupportedAlgorithmError
from ..neural_core import Mlp
from ..trading_env import DISCRETE, ActionSpec, TradingEnv, TradingState
from .learners import AGENT_CLASSES, DeepAgent, deterministic_action
from .tabular import TabularAgent, TradingMdp

TABULAR = ("value_iteration", "policy_iteration")
ALGORITHMS = TABULAR + tuple(AGENT_CLASSES)
MODEL_FORMAT = "quant_rl.trained_model"
MODEL_FORMAT_VERSION = 1


@dataclass
class AgentConfig:
    algorithm: str = "ppo"
    gamma: float = 0.99
    lr: float = 3e-4
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 100_000
    clip_eps: float = 0.2
    entropy_alpha: float = 0.2
    adaptive_alpha: float = 0.1
    # Gaussian exploration sigma as a fraction of the [-1, 1] action range
    exploration_noise: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    target_update_interval: int = 0  # DQN: 0 means soft updates with tau
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    gae_lambda: float = 0.95
    n_steps: int | None = None
    n_epochs: int = 10
    vf_coef: float = 0.5
    hidden: tuple = (64, 64)
    activation: str = "relu"
    learning_starts: int = 100
    train_freq: int = 1
    gradient_steps: int = 1
    max_grad_norm: float | None = None
    policy: str = "gaussian"
    init_log_std: float = -0.5
    normalize_advantages: bool = True
    max_units: int = 2
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 <= self.gamma <= 1.0, "gamma must be in [0, 1]"),
            (self.lr >= 0, "lr must be >= 0"),
            (0.0 < self.tau <= 1.0, "tau must be in (0, 1]"),
            (self.batch_size > 0 and self.buffer_capacity > 0, "batch_size and buffer_capacity must be positive"),
            (self.clip_eps > 0, "clip_eps must be > 0"),
            (self.entropy_alpha >= 0, "entropy_alpha must be >= 0"),
            (0.0 < self.adaptive_alpha <= 1.0, "adaptive_alpha must be in (0, 1]"),
            (self.exploration_noise >= 0, "exploration_noise must be >= 0"),
            (0.0 <= self.eps_end <= self.eps_start <= 1.0, "need 0 <= eps_end <= eps_start <= 1"),
            (0.0 < self.eps_fraction <= 1.0, "eps_fraction must be in (0, 1]"),
            (self.target_update_interval >= 0, "target_update_interval must be >= 0"),
            (self.policy_delay >= 1, "policy_delay must be >= 1"),
            (self.target_noise >= 0 and self.noise_clip >= 0, "target noise settings must be >= 0"),
            (0.0 <= self.gae_lambda <= 1.0, "gae_lambda must be in [0, 1]"),
            (self.n_steps is None or self.n_steps > 0, "n_steps must be positive"),
            (self.n_epochs > 0 and self.train_freq > 0 and self.gradient_steps > 0, "iteration counts must be positive"),
            (self.vf_coef >= 0, "vf_coef must be >= 0"),
            (len(self.hidden) > 0 and min(self.hidden) > 0, "hidden sizes must be positive"),
            (self.activation in ("relu", "tanh"), "activation must be relu or tanh"),
            (self.learning_starts >= 0, "learning_starts must be >= 0"),
            (self.max_grad_norm is None or self.max_grad_norm > 0, "max_grad_norm must be > 0"),
            (self.policy in ("gaussian", "categorical"), "policy must be gaussian or categorical"),
            (self.max_units >= 1, "max_units must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: dict | None) -> "AgentConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown agent config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def get_model(name: str, env: TradingEnv, config: AgentConfig | None = None):
    """Build an untrained agent sized from the env's observation and action dims."""
    if name not in ALGORITHMS:
        raise UnsupportedAlgorithmError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    config = dataclasses.replace(config or AgentConfig(), algorithm=name)
    if name == "dqn" and env.mode != DISCRETE:
        raise IncompatibilityError("DQN needs the discrete_shares action mode, not portfolio weights")
    if name in TABULAR:
        return TabularAgent(name, config, env, config.max_units)
    return AGENT_CLASSES[name](config, env)


@dataclass
class TrainedModel:
    """Snapshot of a trained agent; ``act`` is deterministic and side-effect free."""

    algorithm: str
    config: AgentConfig
    networks: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    def act(self, env: TradingEnv, state: TradingState) -> ActionSpec:
        if self.algorithm in TABULAR:
            return self._tabular_agent().act(env, state)
        return deterministic_action(self.algorithm, self.networks, self.extras, env, env.encode(state))

    def _tabular_agent(self) -> TabularAgent:
        ex = self.extras
        agent = TabularAgent.__new__(TabularAgent)
        agent.algorithm = self.algorithm
        agent.config = self.config
        agent.max_units = ex["max_units"]
        agent.k_max = ex["k_max"]
        agent.n_assets = ex["n_assets"]
        agent.policy = np.asarray(ex["policy"], dtype=int)
        agent.values = np.asarray(ex["values"], dtype=float)
        agent.layout = TradingMdp(None, ex["max_units"], ex["n_dates"], ex["n_assets"],  # type: ignore[arg-type]
                                  np.asarray(ex["moves"], dtype=int))
        return agent

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "header": {"algorithm": self.algorithm, "config": self.config.to_dict(), "seed": self.seed},
            "networks": {k: v.to_dict() for k, v in self.networks.items()},
            "extras": self.extras,
            "diagnostics": self.diagnostics,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainedModel":
        if data.get("format") != MODEL_FORMAT or data.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError("not a trained-model file of a supported version")
        head = data["header"]
        return cls(head["algorithm"], AgentConfig.from_dict(head["config"]),
                   {k: Mlp.from_dict(v) for k, v in data["networks"].items()},
                   data.get("extras", {}), data.get("diagnostics", {}))

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def snapshot(agent, diagnostics: dict | None = None) -> TrainedModel:
    if isinstance(agent, TabularAgent):
        if agent.policy is None:
            raise RuntimeError("tabular agent has not been fitted")
        lay = agent.layout
        extras = {"policy": agent.policy.tolist(), "values": agent.values.tolist(), "max_units": agent.max_units,
                  "k_max": agent.k_max, "n_assets": agent.n_assets, "n_dates": lay.n_dates,
                  "moves": lay.moves.tolist()}
        return TrainedModel(agent.algorithm, agent.config, {}, extras, diagnostics or {})
    nets = {k: v.copy() for k, v in agent.networks().items()}
    return TrainedModel(agent.algorithm, agent.config, nets, agent.extras(), diagnostics or {})


def train_model(agent, env: TradingEnv, total_steps: int) -> TrainedModel:
    """Run the exploration-exploitation loop for ``total_steps`` env steps."""
    if int(total_steps) <= 0:
        raise TooShortError("total_steps must be positive")
    if isinstance(agent, TabularAgent):
        agent.fit(env)
        return snapshot(agent, {"episode_returns": [], "planner": agent.algorithm, "n_states": len(agent.policy)})
    if not isinstance(agent, DeepAgent):
        raise UnsupportedAlgorithmError(f"cannot train object of type {type(agent).__name__}")
    diagnostics = agent.learn(env, int(total_steps))
    return snapshot(agent, diagnostics)


def run_episode(model, env: TradingEnv) -> np.ndarray:
    """Roll a trained model (or agent) through one full episode; returns the value path."""
    state = env.reset()
    done = False
    while not done:
        res = env.step(model.act(env, state))
        state, done = res.next_state, res.done
    return env.values


evaluate = run_episode
