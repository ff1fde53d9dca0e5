"""Point-mass direction and velocity tasks, scripted datasets and the rollout evaluator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import TaskDataset, Trajectory, sample_prompt
from .errors import ConfigError, NumericError
from .model import ModelConfig, predict_next_actions
from .params import apply_mask
from .tokens import Steps

DT = 0.1
STATE_DIM = 4
ACTION_DIM = 2
EXPERT_NOISE = 0.05
EXPERT_EPISODES = 32
SUCCESS_FRACTION = 0.8
REGIMES = ("near_optimal", "sub_optimal")


@dataclass(frozen=True)
class PointTaskSpec:
    task_id: str
    kind: str
    angle: float = 0.0
    target_speed: float = 0.0
    horizon: int = 50
    action_bound: float = 1.0
    gamma: float = 1.0
    state_dim: int = STATE_DIM

    def __post_init__(self):
        if self.kind not in ("dir", "vel"):
            raise ConfigError(f"task kind must be 'dir' or 'vel', got {self.kind!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.action_bound <= 0:
            raise ConfigError("action_bound must be positive")
        if not 0.0 <= self.target_speed <= self.action_bound:
            raise ConfigError("target_speed must lie in [0, action_bound]")
        if self.state_dim != STATE_DIM:
            raise ConfigError("point tasks have a 4-dimensional state")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    task_id: str
    episodes: int
    mean_return: float
    success_rate: float
    per_episode_returns: list[float] = field(default_factory=list)
    success_threshold: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = 1
        return d


def clamp_action(spec: PointTaskSpec, action: np.ndarray) -> np.ndarray:
    """Project actions onto the ball of radius action_bound."""
    a = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.minimum(1.0, spec.action_bound / np.maximum(norm, 1e-300))
    return a * scale


def env_step(spec: PointTaskSpec, state: np.ndarray, action: np.ndarray):
    """One transition; works on a single state [4] or a batch [..., 4]."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise NumericError("non-finite state or action passed to env_step")
    vel = clamp_action(spec, action)
    pos = state[..., :2] + vel * DT
    nxt = np.concatenate([pos, vel], axis=-1)
    if spec.kind == "dir":
        reward = vel @ np.array([math.cos(spec.angle), math.sin(spec.angle)])
    else:
        reward = -np.abs(np.linalg.norm(vel, axis=-1) - spec.target_speed)
    return nxt, reward


def expert_action(spec: PointTaskSpec) -> np.ndarray:
    if spec.kind == "dir":
        return spec.action_bound * np.array([math.cos(spec.angle), math.sin(spec.angle)])
    return np.array([spec.target_speed, 0.0])


def initial_states(n: int, rng: np.random.Generator) -> np.ndarray:
    s = np.zeros((n, STATE_DIM))
    s[:, :2] = rng.uniform(-0.1, 0.1, size=(n, 2))
    return s


def _run_scripted(spec: PointTaskSpec, actions_fn, n: int, rng: np.random.Generator):
    """Roll out ``n`` episodes in lockstep; actions_fn(rng, n) -> raw actions [n, 2]."""
    s = initial_states(n, rng)
    states = np.zeros((n, spec.horizon, STATE_DIM))
    actions = np.zeros((n, spec.horizon, ACTION_DIM))
    rewards = np.zeros((n, spec.horizon))
    for t in range(spec.horizon):
        a = clamp_action(spec, actions_fn(rng, n))
        states[:, t] = s
        actions[:, t] = a
        s, rewards[:, t] = env_step(spec, s, a)
    return states, actions, rewards


def _noisy_expert(spec: PointTaskSpec, sigmas: np.ndarray):
    base = expert_action(spec)

    def fn(rng, n):
        return base + rng.normal(size=(n, ACTION_DIM)) * (sigmas[:, None] * spec.action_bound)
    return fn


def _uniform_policy(spec: PointTaskSpec):
    def fn(rng, n):
        return rng.uniform(-spec.action_bound, spec.action_bound, size=(n, ACTION_DIM))
    return fn


def gen_dataset(spec: PointTaskSpec, n_traj: int, regime: str, seed) -> TaskDataset:
    """Scripted offline data: replay-style mixed-noise half plus expert or random half."""
    if n_traj < 1:
        raise ConfigError("n_traj must be >= 1")
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    rng = np.random.default_rng(seed)
    n_mixed = n_traj // 2
    n_other = n_traj - n_mixed
    parts = []
    if n_mixed:
        sig = np.linspace(0.5, EXPERT_NOISE, n_mixed) if n_mixed > 1 else np.array([0.5])
        parts.append(_run_scripted(spec, _noisy_expert(spec, sig), n_mixed, rng))
    if regime == "near_optimal":
        sig = np.full(n_other, EXPERT_NOISE)
        parts.append(_run_scripted(spec, _noisy_expert(spec, sig), n_other, rng))
    else:
        parts.append(_run_scripted(spec, _uniform_policy(spec), n_other, rng))
    trajs = []
    for states, actions, rewards in parts:
        for i in range(states.shape[0]):
            trajs.append(Trajectory(spec.task_id, states[i], actions[i], rewards[i]))
    return TaskDataset(spec.task_id, trajs, gamma=spec.gamma)


def expert_mean_return(spec: PointTaskSpec, episodes: int = EXPERT_EPISODES,
                       seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 7])
    sig = np.full(episodes, EXPERT_NOISE)
    _, _, rewards = _run_scripted(spec, _noisy_expert(spec, sig), episodes, rng)
    return float(rewards.sum(1).mean())


def success_threshold(expert_return: float) -> float:
    # 80% of expert return; the |.| form keeps it below the expert for negative returns
    return expert_return - (1.0 - SUCCESS_FRACTION) * abs(expert_return)


Policy = Callable[[Sequence[Steps], Sequence[Steps]], np.ndarray]


def rollout(theta: Optional[np.ndarray], config: ModelConfig, mask: Optional[np.ndarray],
            spec: PointTaskSpec, prompt_source: TaskDataset, target_return: float,
            episodes: int, seed, threshold: Optional[float] = None,
            policy: Optional[Policy] = None) -> EvalReport:
    """Return-conditioned evaluation with the task's masked parameters.

    Episodes run in lockstep as one batch. ``policy`` replaces the model
    when given (used for scripted stand-ins). ``threshold`` defaults to 80%
    of the scripted expert's mean return.
    """
    if not math.isfinite(target_return):
        raise ConfigError("target_return must be finite")
    if threshold is None:
        threshold = success_threshold(expert_mean_return(spec))
    if episodes <= 0:
        return EvalReport(spec.task_id, 0, 0.0, 0.0, [], threshold)
    if policy is None:
        if mask is not None and np.shape(mask) != np.shape(theta):
            raise ConfigError("mask length does not match theta")
        theta_i = apply_mask(theta, mask) if mask is not None else np.asarray(theta)

        def policy(prompts, histories):
            return predict_next_actions(theta_i, config, prompts, histories)

    rng = np.random.default_rng(seed)
    prompts = [sample_prompt(prompt_source, config.prompt_Kstar, rng) for _ in range(episodes)]
    s = initial_states(episodes, rng)
    k = config.context_K
    n_hist = min(k, spec.horizon)
    rtg_h = np.zeros((episodes, n_hist))
    st_h = np.zeros((episodes, n_hist, STATE_DIM))
    ac_h = np.zeros((episodes, n_hist, ACTION_DIM))
    ts_h = np.zeros((episodes, n_hist), dtype=np.int64)
    rtg = np.full(episodes, float(target_return))
    returns = np.zeros(episodes)
    for t in range(spec.horizon):
        slot = min(t, n_hist - 1)
        if t >= n_hist:
            for arr in (rtg_h, st_h, ac_h, ts_h):
                arr[:, :-1] = arr[:, 1:]
        rtg_h[:, slot] = rtg
        st_h[:, slot] = s
        ac_h[:, slot] = 0.0
        ts_h[:, slot] = t
        n = slot + 1
        histories = [Steps(rtg_h[e, :n], st_h[e, :n], ac_h[e, :n], ts_h[e, :n])
                     for e in range(episodes)]
        a = clamp_action(spec, policy(prompts, histories))
        ac_h[:, slot] = a
        s, r = env_step(spec, s, a)
        returns += r
        rtg = rtg - r
    per_ep = [float(x) for x in returns]
    success = float(np.mean(returns >= threshold))
    return EvalReport(spec.task_id, episodes, float(np.mean(returns)), success, per_ep, threshold)


def expert_policy(spec: PointTaskSpec) -> Policy:
    def policy(prompts, histories):
        return np.tile(expert_action(spec), (len(histories), 1))
    return policy
