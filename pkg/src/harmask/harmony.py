"""Gradient-derived statistics: agreement, importance, harmony scores and the
averaged harmony diagnostic."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateLossError
from .model import ModelConfig, loss_and_grad
from .params import apply_mask
from .tokens import TokenBatch

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
METRIC_EPS = 1e-12


@dataclass
class GradientBundle:
    per_task_masked: dict[str, np.ndarray]
    per_task_raw: dict[str, np.ndarray]
    average: np.ndarray
    losses: dict[str, float]
    raw_losses: dict[str, float]


def masked_gradient(theta: np.ndarray, config: ModelConfig, mask: np.ndarray,
                    batch: TokenBatch, rng=None) -> tuple[float, np.ndarray]:
    """Loss at theta*M and its gradient times M (exact zeros where M is 0)."""
    mask = np.asarray(mask, dtype=bool)
    value, grad = loss_and_grad(apply_mask(theta, mask), config, batch, rng)
    grad[~mask] = 0.0
    return value, grad


def average_gradient(grads: Mapping[str, np.ndarray]) -> np.ndarray:
    ids = sorted(grads)
    total = np.zeros_like(grads[ids[0]])
    for t in ids:
        total += grads[t]
    return total / len(ids)


def gradient_bundle(theta: np.ndarray, config: ModelConfig, masks: Mapping[str, np.ndarray],
                    batches: Mapping[str, TokenBatch], with_raw: bool = True,
                    threads: int = 1) -> GradientBundle:
    """Masked and raw per-task gradients on one batch per task.

    Per-task work may fan out over threads; results are reduced in sorted
    task order so the average is identical for any thread count.
    """
    ids = sorted(masks)

    def work(task):
        lm, gm = masked_gradient(theta, config, masks[task], batches[task])
        if with_raw:
            lr, gr = loss_and_grad(theta, config, batches[task])
        else:
            lr, gr = lm, gm
        return task, lm, gm, lr, gr

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, ids))
    else:
        results = [work(t) for t in ids]
    masked = {t: gm for t, _, gm, _, _ in results}
    raw = {t: gr for t, _, _, _, gr in results}
    losses = {t: lm for t, lm, _, _, _ in results}
    raw_losses = {t: lr for t, _, _, lr, _ in results}
    return GradientBundle(masked, raw, average_gradient(masked), losses, raw_losses)


def agreement_score(g_masked: np.ndarray, g_avg: np.ndarray) -> np.ndarray:
    g_masked, g_avg = np.asarray(g_masked, float), np.asarray(g_avg, float)
    if g_masked.shape != g_avg.shape:
        raise ValueError("agreement_score needs equal-length vectors")
    return g_masked * g_avg


def importance_magnitude(theta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.abs(apply_mask(theta, mask))


def importance_fisher(raw_grad: np.ndarray, loss_value: float, mask: np.ndarray) -> np.ndarray:
    """Squared masked gradient of log L, using grad(log L) = grad(L) / L."""
    if not loss_value > LOG_EPS:
        raise DegenerateLossError(f"loss {loss_value!r} too small for a log-gradient")
    scaled = np.asarray(raw_grad, float) / loss_value
    return apply_mask(scaled, mask) ** 2


def harmony_score(agreement: np.ndarray, importance: np.ndarray, lam: float,
                  mask: np.ndarray) -> np.ndarray:
    """agreement + lam * importance on active coords, +inf on inactive ones."""
    if lam < 0:
        raise ConfigError("balance factor lambda must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    h = np.asarray(agreement, float) + lam * np.asarray(importance, float)
    return np.where(mask, h, np.inf)


def avg_harmony_metric(grads: Sequence[np.ndarray], epsilon: float = METRIC_EPS) -> float:
    """Mean over tasks and coordinates of sign-like agreement with the average gradient.

    Each term is g_ij * avg_j / max(|g_ij| |avg_j|, epsilon); a term is 0
    whenever either factor is 0.
    """
    if len(grads) == 0:
        raise ValueError("need at least one gradient")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = np.stack([np.asarray(x, float) for x in grads])
    avg = g.mean(0)
    num = g * avg
    den = np.maximum(np.abs(g) * np.abs(avg), epsilon)
    return float((num / den).mean())


def importance(kind: str, theta: np.ndarray, mask: np.ndarray, raw_grad: np.ndarray,
               loss_value: float) -> np.ndarray:
    if kind == "magnitude":
        return importance_magnitude(theta, mask)
    if kind == "fisher":
        try:
            return importance_fisher(raw_grad, loss_value, mask)
        except DegenerateLossError:
            log.warning("loss %.3g too small for Fisher importance; using magnitude", loss_value)
            return importance_magnitude(theta, mask)
    raise ConfigError(f"unknown importance kind {kind!r}")
