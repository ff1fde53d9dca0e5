"""Periodic per-task mask revision: mask the least harmonious active weights,
then recover the same number of inactive weights with the best agreement."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, SelectionError
from .harmony import agreement_score, gradient_bundle, harmony_score, importance
from .model import ModelConfig
from .params import MaskSet
from .tokens import TokenBatch

log = logging.getLogger(__name__)


@dataclass
class MaskUpdateRecord:
    task_id: str
    round: int
    masked_indices: list[int]
    recovered_indices: list[int]
    alpha: int
    ones_before: int = 0
    ones_after: int = 0
    warning: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _select(values: np.ndarray, k: int, largest: bool) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros(values.shape[0], dtype=bool)
    if k < 0:
        raise SelectionError("k must be non-negative")
    if k == 0:
        return out
    idx = np.flatnonzero(np.isfinite(values))
    if k > idx.size:
        raise SelectionError(f"cannot select {k} of {idx.size} finite entries")
    key = -values[idx] if largest else values[idx]
    # stable sort keeps the lower index first among ties
    out[idx[np.argsort(key, kind="stable")[:k]]] = True
    return out


def arg_btm_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the k smallest finite entries, ties to the lower index."""
    return _select(values, k, largest=False)


def arg_top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the k largest finite entries, ties to the lower index."""
    return _select(values, k, largest=True)


def mask_update(task_ids, masks: MaskSet, theta: np.ndarray, lam: float, alpha: int,
                importance_kind: str, batches: Mapping[str, TokenBatch], config: ModelConfig,
                round_index: int = 0, threads: int = 1,
                bundle=None) -> tuple[MaskSet, list[MaskUpdateRecord]]:
    """One evaluation/masking/recovery pass over every task.

    ``bundle`` may carry precomputed gradients for the same theta and masks.
    """
    ids = sorted(task_ids)
    if set(ids) != set(masks.masks):
        raise ConfigError("task list does not match the mask set")
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    new = masks.copy()
    records = []
    if alpha == 0:
        for t in ids:
            n = int(masks[t].sum())
            records.append(MaskUpdateRecord(t, round_index, [], [], 0, n, n))
        return new, records

    if bundle is None:
        bundle = gradient_bundle(theta, config, masks.masks, batches, with_raw=True,
                                 threads=threads)
    g_avg = bundle.average
    for t in ids:
        m = new.masks[t]
        before = int(m.sum())
        a = alpha
        warning = None
        if a > before:
            warning = f"alpha {alpha} clamped to active count {before}"
            log.warning("task %s: %s", t, warning)
            a = before
        agree = agreement_score(bundle.per_task_masked[t], g_avg)
        imp = importance(importance_kind, theta, m, bundle.per_task_masked[t],
                         bundle.losses[t])
        h = harmony_score(agree, imp, lam, m)
        drop = arg_btm_k(h, a)
        m &= ~drop
        recover_score = np.where(m, -np.inf, bundle.per_task_raw[t] * g_avg)
        grow = arg_top_k(recover_score, a)
        m |= grow
        records.append(MaskUpdateRecord(
            t, round_index, [int(i) for i in np.flatnonzero(drop)],
            [int(i) for i in np.flatnonzero(grow)], a, before, int(m.sum()), warning))
    return new, records


def unseen_mask(masks: MaskSet, thresh: int) -> np.ndarray:
    """Majority-style vote: coordinate kept iff more than ``thresh`` tasks keep it."""
    if len(masks) == 0:
        raise ValueError("cannot vote over an empty mask set")
    n = len(masks)
    if not 0 <= thresh <= n:
        raise ConfigError(f"thresh must lie in [0, {n}]")
    votes = np.sum([masks[t].astype(np.int64) for t in masks.task_ids], axis=0)
    return votes > thresh


def default_thresh(n_tasks: int) -> int:
    return -(-n_tasks // 2)
