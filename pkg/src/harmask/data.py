"""Offline trajectories, returns-to-go, prompt sampling and batch assembly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, HarmaskError
from .tokens import Steps, TokenBatch, assemble


class ParseError(HarmaskError, ValueError):
    pass


class SchemaError(HarmaskError, ValueError):
    pass


@dataclass
class Trajectory:
    task_id: str
    states: np.ndarray   # [T, state_dim]
    actions: np.ndarray  # [T, action_dim]
    rewards: np.ndarray  # [T]

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        t = self.rewards.shape[0] if self.rewards.ndim == 1 else -1
        if (t < 1 or self.states.ndim != 2 or self.actions.ndim != 2
                or self.states.shape[0] != t or self.actions.shape[0] != t):
            raise SchemaError(
                f"trajectory for {self.task_id!r} has inconsistent lengths "
                f"{self.states.shape}, {self.actions.shape}, {self.rewards.shape}")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))
                and np.all(np.isfinite(self.rewards))):
            raise SchemaError(f"trajectory for {self.task_id!r} has non-finite entries")

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def compute_rtg(rewards, gamma: float = 1.0) -> np.ndarray:
    """Discounted suffix sums: rtg[t] = r[t] + gamma * rtg[t+1]."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("compute_rtg needs a non-empty reward vector")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class TaskDataset:
    task_id: str
    trajectories: list[Trajectory]
    gamma: float = 1.0
    prompt_fraction: float = 0.1
    rtg_cache: list[np.ndarray] = field(init=False)
    prompt_pool: list[int] = field(init=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ConfigError(f"dataset for {self.task_id!r} is empty")
        dims = {(t.states.shape[1], t.actions.shape[1]) for t in self.trajectories}
        if len(dims) != 1:
            raise SchemaError(f"dataset for {self.task_id!r} mixes state/action dims {dims}")
        self.rtg_cache = [compute_rtg(t.rewards, self.gamma) for t in self.trajectories]
        returns = np.array([t.total_return for t in self.trajectories])
        n_pool = max(1, math.ceil(self.prompt_fraction * len(returns)))
        order = np.argsort(-returns, kind="stable")
        self.prompt_pool = sorted(int(i) for i in order[:n_pool])

    @property
    def state_dim(self) -> int:
        return int(self.trajectories[0].states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.trajectories[0].actions.shape[1])

    def steps(self, traj_index: int, start: int, stop: int) -> Steps:
        tr = self.trajectories[traj_index]
        return Steps(self.rtg_cache[traj_index][start:stop], tr.states[start:stop],
                     tr.actions[start:stop], np.arange(start, stop, dtype=np.int64))


def sample_prompt(dataset: TaskDataset, kstar: int, rng: np.random.Generator) -> Steps:
    """A uniform contiguous window of ``kstar`` steps from a uniform pool trajectory."""
    if kstar == 0:
        return Steps.empty(dataset.state_dim, dataset.action_dim)
    pool = [i for i in dataset.prompt_pool if len(dataset.trajectories[i]) >= kstar]
    if not pool:
        raise ConfigError(
            f"prompt length {kstar} exceeds every prompt trajectory of {dataset.task_id!r}")
    ti = pool[int(rng.integers(len(pool)))]
    start = int(rng.integers(len(dataset.trajectories[ti]) - kstar + 1))
    return dataset.steps(ti, start, start + kstar)


def sample_batch(dataset: TaskDataset, k: int, kstar: int, batch_size: int,
                 rng: np.random.Generator) -> TokenBatch:
    """``batch_size`` independent history windows, each with its own prompt."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    prompts, histories = [], []
    n = len(dataset.trajectories)
    for _ in range(batch_size):
        ti = int(rng.integers(n))
        t = int(rng.integers(len(dataset.trajectories[ti])))
        histories.append(dataset.steps(ti, max(0, t - k + 1), t + 1))
        prompts.append(sample_prompt(dataset, kstar, rng))
    return assemble(prompts, histories, k, kstar, dataset.state_dim, dataset.action_dim)


def _traj_json(tr: Trajectory) -> str:
    # json floats use repr, which round-trips float64 exactly
    return json.dumps({
        "task_id": tr.task_id,
        "states": tr.states.tolist(),
        "actions": tr.actions.tolist(),
        "rewards": tr.rewards.tolist(),
    })


def save_jsonl(datasets: Iterable[TaskDataset], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for ds in datasets:
            for tr in ds.trajectories:
                fh.write(_traj_json(tr))
                fh.write("\n")
    tmp.replace(path)


def load_jsonl(path, gamma: float = 1.0) -> list[TaskDataset]:
    """Read trajectories grouped into one TaskDataset per task, in first-seen order."""
    groups: dict[str, list[Trajectory]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(obj, dict) or set(obj) != {"task_id", "states", "actions", "rewards"}:
                raise SchemaError(f"{path}:{lineno}: expected keys task_id, states, actions, rewards")
            try:
                tr = Trajectory(str(obj["task_id"]), obj["states"], obj["actions"], obj["rewards"])
            except (SchemaError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault(tr.task_id, []).append(tr)
    out = [TaskDataset(tid, trs, gamma=gamma) for tid, trs in groups.items()]
    dims = {(d.state_dim, d.action_dim) for d in out}
    if len(dims) > 1:
        raise SchemaError(f"{path}: inconsistent dims across tasks {dims}")
    return out


def probe_batches(datasets: Sequence[TaskDataset], k: int, kstar: int, batch_size: int,
                  seed: Optional[int]) -> dict[str, TokenBatch]:
    rng = np.random.default_rng(seed)
    return {ds.task_id: sample_batch(ds, k, kstar, batch_size, rng)
            for ds in sorted(datasets, key=lambda d: d.task_id)}


def check_dims(datasets: Sequence[TaskDataset], state_dim: int, action_dim: int) -> None:
    for ds in datasets:
        if ds.state_dim != state_dim or ds.action_dim != action_dim:
            raise DimensionError(
                f"dataset {ds.task_id!r} has dims ({ds.state_dim}, {ds.action_dim}), "
                f"model expects ({state_dim}, {action_dim})")
