from .api import ALGORITHMS, AgentConfig, TrainedModel, evaluate, get_model, run_episode, snapshot, train_model
from .buffer import Batch, ReplayBuffer, Transition
from .tabular import TabularAgent, TabularMdp, env_to_mdp, evaluate_policy, policy_iteration, q_values, value_iteration
from .updates import (
    a2c_update,
    adaptive_ddpg_q_step,
    adaptive_ddpg_update,
    ddpg_update,
    dqn_update,
    ppo_clip_bound,
    ppo_objective,
    ppo_update,
    sac_target,
    sac_update,
    td3_target,
    td3_update,
)

__all__ = [
    "ALGORITHMS", "AgentConfig", "TrainedModel", "evaluate", "get_model", "run_episode", "snapshot", "train_model",
    "Batch", "ReplayBuffer", "Transition",
    "TabularAgent", "TabularMdp", "env_to_mdp", "evaluate_policy", "policy_iteration", "q_values", "value_iteration",
    "a2c_update", "adaptive_ddpg_q_step", "adaptive_ddpg_update", "ddpg_update", "dqn_update", "ppo_clip_bound",
    "ppo_objective", "ppo_update", "sac_target", "sac_update", "td3_target", "td3_update",
]
