"""Step sequences and padded token batches fed to the policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Steps:
    """A contiguous run of (rtg, state, action, timestep) tuples in episode order."""

    rtg: np.ndarray        # [n]
    states: np.ndarray     # [n, state_dim]
    actions: np.ndarray    # [n, action_dim]
    timesteps: np.ndarray  # [n] int

    def __len__(self) -> int:
        return int(self.rtg.shape[0])

    def tail(self, k: int) -> "Steps":
        if k <= 0:
            return Steps(self.rtg[:0], self.states[:0], self.actions[:0], self.timesteps[:0])
        return Steps(self.rtg[-k:], self.states[-k:], self.actions[-k:], self.timesteps[-k:])

    @classmethod
    def empty(cls, state_dim: int, action_dim: int) -> "Steps":
        return cls(np.zeros(0), np.zeros((0, state_dim)), np.zeros((0, action_dim)),
                   np.zeros(0, dtype=np.int64))


@dataclass
class TokenBatch:
    """Prompt block (first Kstar steps) followed by a left-padded K-step history."""

    rtg: np.ndarray             # [B, Kstar+K, 1]
    states: np.ndarray          # [B, Kstar+K, state_dim]
    actions: np.ndarray         # [B, Kstar+K, action_dim]
    timesteps: np.ndarray       # [B, Kstar+K] int
    valid: np.ndarray           # [B, Kstar+K] float 0/1
    target_actions: np.ndarray  # [B, K, action_dim]
    kstar: int

    @property
    def size(self) -> int:
        return int(self.rtg.shape[0])

    @property
    def k(self) -> int:
        return int(self.rtg.shape[1]) - self.kstar

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.rtg[idx], self.states[idx], self.actions[idx],
                          self.timesteps[idx], self.valid[idx], self.target_actions[idx],
                          self.kstar)


def _fill(dst_i, steps: Steps, start: int, rtg, states, actions, ts, valid):
    n = len(steps)
    sl = slice(start, start + n)
    rtg[dst_i, sl, 0] = steps.rtg
    states[dst_i, sl] = steps.states
    actions[dst_i, sl] = steps.actions
    ts[dst_i, sl] = steps.timesteps
    valid[dst_i, sl] = 1.0


def assemble(prompts: Sequence[Steps], histories: Sequence[Steps], k: int, kstar: int,
             state_dim: int, action_dim: int) -> TokenBatch:
    """Stack prompts and histories into a TokenBatch; histories are left-padded.

    Prompts shorter than ``kstar`` are left-padded as well. Histories longer
    than ``k`` keep their last ``k`` steps. Targets are the history actions.
    """
    b = len(histories)
    n = kstar + k
    rtg = np.zeros((b, n, 1))
    states = np.zeros((b, n, state_dim))
    actions = np.zeros((b, n, action_dim))
    ts = np.zeros((b, n), dtype=np.int64)
    valid = np.zeros((b, n))
    for i, (p, h) in enumerate(zip(prompts, histories)):
        p = p.tail(kstar)
        h = h.tail(k)
        _fill(i, p, kstar - len(p), rtg, states, actions, ts, valid)
        _fill(i, h, n - len(h), rtg, states, actions, ts, valid)
    targets = actions[:, kstar:].copy()
    return TokenBatch(rtg, states, actions, ts, valid, targets, kstar)
