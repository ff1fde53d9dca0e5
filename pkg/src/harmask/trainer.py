"""Training loop: masked inner updates interleaved with periodic mask revision."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .config import TrainConfig
from .data import TaskDataset, check_dims, probe_batches, sample_batch
from .errors import CheckpointError, ConfigError, NumericError
from .harmony import avg_harmony_metric, gradient_bundle, masked_gradient
from .mask_update import MaskUpdateRecord, mask_update
from .model import build_layout, init_params
from .params import LayerLayout, MaskSet, all_ones, erk_init, pack_bits, unpack_bits

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "harmask-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ["schema_version", "round", "task_id", "loss_ema", "avg_harmony_raw",
                   "avg_harmony_masked", "alpha_t"]
IMPORTANCE = {"M": "magnitude", "F": "fisher"}


def alpha_schedule(t: int, E: int, eta_min: float, eta_max: float) -> int:
    """Number of mask bits changed at round t: cosine from eta_min up to eta_max and back."""
    if not 1 <= t <= E:
        raise ValueError(f"round {t} outside [1, {E}]")
    x = eta_max + 0.5 * (eta_min - eta_max) * (1.0 + math.cos(2.0 * math.pi * t / E))
    # strip float noise such as cos(3*pi/2) != 0 before taking the ceiling
    return int(math.ceil(round(x, 9)))


@dataclass
class TrainState:
    theta: np.ndarray
    masks: MaskSet
    m: np.ndarray
    v: np.ndarray
    adam_step: int = 0
    round: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    loss_ema: dict[str, float] = field(default_factory=dict)
    ema_initial: dict[str, float] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    audit: list[MaskUpdateRecord] = field(default_factory=list)


def inner_step(state: TrainState, config: TrainConfig, task_id: str, batch,
               grad: Optional[np.ndarray] = None, loss_value: Optional[float] = None) -> TrainState:
    """One optimizer step on the task's masked gradient; inactive coords stay put.

    ``grad`` may be supplied directly (the mask is still applied to it).
    """
    mask = state.masks[task_id]
    if grad is None:
        drop_rng = state.rng if config.model.dropout > 0 else None
        loss_value, grad = masked_gradient(state.theta, config.model_cfg(), mask, batch, drop_rng)
    else:
        grad = np.where(mask, grad, 0.0)
    if loss_value is not None and not math.isfinite(loss_value):
        raise NumericError(f"non-finite loss at round {state.round}")
    if config.optimizer == "sgd":
        state.theta = state.theta - config.eta * grad
    else:
        b1, b2 = config.beta1, config.beta2
        state.m = b1 * state.m + (1.0 - b1) * grad
        state.v = b2 * state.v + (1.0 - b2) * grad * grad
        state.adam_step += 1
        mhat = state.m / (1.0 - b1 ** state.adam_step)
        vhat = state.v / (1.0 - b2 ** state.adam_step)
        update = config.eta * mhat / (np.sqrt(vhat) + config.eps_adam)
        update[~mask] = 0.0
        state.theta = state.theta - update
    if loss_value is not None:
        if task_id in state.loss_ema:
            d = config.ema_decay
            state.loss_ema[task_id] = d * state.loss_ema[task_id] + (1.0 - d) * loss_value
        else:
            state.loss_ema[task_id] = loss_value
            state.ema_initial[task_id] = loss_value
    return state


StepHook = Callable[[TrainState, str, np.ndarray, np.ndarray], None]


class Trainer:
    """Owns the training state for one run over a fixed set of task datasets."""

    def __init__(self, config: TrainConfig, datasets: Sequence[TaskDataset],
                 state: Optional[TrainState] = None):
        if not datasets:
            raise ConfigError("training needs at least one dataset")
        self.config = config
        self.model_cfg = config.model_cfg()
        self.layout: LayerLayout = build_layout(self.model_cfg)
        self.datasets = {d.task_id: d for d in datasets}
        if len(self.datasets) != len(datasets):
            raise ConfigError("duplicate task ids among datasets")
        self.task_ids = sorted(self.datasets)
        check_dims(datasets, self.model_cfg.state_dim, self.model_cfg.action_dim)
        self.eta_max = config.resolved_eta_max(self.layout.total)
        self.probes = probe_batches(datasets, config.K, config.Kstar, config.probe_batch_size,
                                    seeding.stream_seed(config.seed, "probe"))
        self.state = state if state is not None else self._init_state()
        if sorted(self.state.masks.masks) != self.task_ids:
            raise ConfigError("mask set tasks do not match the datasets")
        self.step_hook: Optional[StepHook] = None

    def _init_state(self) -> TrainState:
        cfg = self.config
        theta = init_params(self.model_cfg, seeding.rng_for(cfg.seed, "init"))
        if cfg.variant == "none":
            masks = all_ones(self.layout.total, self.task_ids)
        else:
            masks = erk_init(self.layout, cfg.S, self.task_ids,
                             seeding.int_seed(cfg.seed, "masks"))
        zeros = np.zeros_like(theta)
        return TrainState(theta, masks, zeros, zeros.copy(),
                          rng=seeding.rng_for(cfg.seed, "train"))

    @property
    def learns_masks(self) -> bool:
        return self.config.variant in IMPORTANCE

    def current_alpha(self, t: int) -> int:
        if not self.learns_masks:
            return 0
        return alpha_schedule(t, self.config.E, self.config.eta_min, self.eta_max)

    def run(self, until: Optional[int] = None) -> TrainState:
        cfg, st = self.config, self.state
        stop = cfg.E if until is None else min(until, cfg.E)
        while st.round < stop:
            t = st.round + 1
            try:
                if self.learns_masks and t % cfg.t_m == 0:
                    self._mask_round(t)
                else:
                    self._inner_round()
            except NumericError as exc:
                raise NumericError(f"round {t}: {exc}") from exc
            st.round = t
            if t % cfg.log_every == 0:
                self._log(t)
        return st

    def _inner_round(self):
        cfg, st = self.config, self.state
        task = self.task_ids[int(st.rng.integers(len(self.task_ids)))]
        batch = sample_batch(self.datasets[task], cfg.K, cfg.Kstar, cfg.batch_size, st.rng)
        before = st.theta if self.step_hook is not None else None
        inner_step(st, cfg, task, batch)
        if self.step_hook is not None:
            self.step_hook(st, task, before, st.theta)

    def _mask_round(self, t: int):
        cfg, st = self.config, self.state
        batches = {task: sample_batch(self.datasets[task], cfg.K, cfg.Kstar,
                                      cfg.stat_batch_size, st.rng)
                   for task in self.task_ids}
        alpha = self.current_alpha(t)
        st.masks, records = mask_update(self.task_ids, st.masks, st.theta, cfg.lam, alpha,
                                        IMPORTANCE[cfg.variant], batches, self.model_cfg,
                                        round_index=t, threads=cfg.threads)
        st.audit.extend(records)

    def harmony_metrics(self) -> tuple[float, float]:
        """Averaged harmony of raw and of masked gradients on the fixed probe batches."""
        b = gradient_bundle(self.state.theta, self.model_cfg, self.state.masks.masks,
                            self.probes, with_raw=self.config.variant != "none",
                            threads=self.config.threads)
        masked = avg_harmony_metric([b.per_task_masked[t] for t in self.task_ids])
        if self.config.variant == "none":
            return masked, masked
        return avg_harmony_metric([b.per_task_raw[t] for t in self.task_ids]), masked

    def _log(self, t: int):
        st = self.state
        h_raw, h_masked = self.harmony_metrics()
        alpha = self.current_alpha(t)
        emas = []
        for task in self.task_ids:
            ema = st.loss_ema.get(task)
            if ema is not None:
                emas.append(ema)
            st.metrics.append({"schema_version": METRICS_SCHEMA_VERSION, "round": t,
                               "task_id": task, "loss_ema": ema, "avg_harmony_raw": None,
                               "avg_harmony_masked": None, "alpha_t": alpha})
        st.metrics.append({"schema_version": METRICS_SCHEMA_VERSION, "round": t,
                           "task_id": "all",
                           "loss_ema": float(np.mean(emas)) if emas else None,
                           "avg_harmony_raw": h_raw, "avg_harmony_masked": h_masked,
                           "alpha_t": alpha})


def train(config: TrainConfig, datasets: Sequence[TaskDataset]):
    """Run a full training and return (theta, masks, metrics rows)."""
    trainer = Trainer(config, datasets)
    st = trainer.run()
    return st.theta, st.masks, st.metrics


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in METRICS_COLUMNS})
    return buf.getvalue()


def audit_jsonl(records: Sequence[MaskUpdateRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


# checkpoints -----------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write_dir(path: Path, files: dict[str, bytes]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    try:
        for name, data in files.items():
            with open(tmp / name, "wb") as fh:
                fh.write(data)
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            path.rename(old)
            tmp.rename(path)
            shutil.rmtree(old)
        else:
            tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def checkpoint_files(state: TrainState, config: TrainConfig) -> dict[str, bytes]:
    layout = build_layout(config.model_cfg())
    blob = io.BytesIO()
    offsets = {}

    def put(name, data: bytes):
        offsets[name] = {"offset": blob.tell(), "nbytes": len(data)}
        blob.write(data)

    put("theta", np.asarray(state.theta, "<f8").tobytes())
    put("adam_m", np.asarray(state.m, "<f8").tobytes())
    put("adam_v", np.asarray(state.v, "<f8").tobytes())
    task_ids = sorted(state.masks.masks)
    for t in task_ids:
        put(f"mask:{t}", pack_bits(state.masks[t]))
    data = blob.getvalue()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "layout": layout.to_json(),
        "round": state.round,
        "adam_step": state.adam_step,
        "rng_state": state.rng.bit_generator.state,
        "task_ids": task_ids,
        "sparsity": state.masks.sparsity,
        "densities": state.masks.densities,
        "loss_ema": state.loss_ema,
        "ema_initial": state.ema_initial,
        "metrics": state.metrics,
        "audit": [r.__dict__ for r in state.audit],
        "blob": {"file": "state.bin", "sha256": _sha256(data), "nbytes": len(data),
                 "entries": offsets},
    }
    text = json.dumps(manifest, sort_keys=True, indent=1)
    return {"manifest.json": text.encode(), "state.bin": data}


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    _atomic_write_dir(Path(path), checkpoint_files(state, config))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} is incompatible with "
            f"version {CHECKPOINT_VERSION}")
    try:
        data = (path / manifest["blob"]["file"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob: {exc}") from None
    if len(data) != manifest["blob"]["nbytes"] or _sha256(data) != manifest["blob"]["sha256"]:
        raise CheckpointError("checkpoint blob is truncated or corrupted")
    config = TrainConfig.model_validate(manifest["config"])
    layout = LayerLayout.from_json(manifest["layout"])
    if layout != build_layout(config.model_cfg()):
        raise CheckpointError("checkpoint layout does not match its model config")
    entries = manifest["blob"]["entries"]

    def get(name):
        e = entries[name]
        return data[e["offset"]:e["offset"] + e["nbytes"]]

    def floats(name):
        arr = np.frombuffer(get(name), dtype="<f8").astype(np.float64)
        if arr.shape != (layout.total,):
            raise CheckpointError(f"checkpoint array {name} has the wrong length")
        return arr

    masks = {t: unpack_bits(get(f"mask:{t}"), layout.total) for t in manifest["task_ids"]}
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainState(
        theta=floats("theta"),
        masks=MaskSet(masks, manifest["sparsity"], manifest["densities"]),
        m=floats("adam_m"), v=floats("adam_v"),
        adam_step=int(manifest["adam_step"]), round=int(manifest["round"]), rng=rng,
        loss_ema=dict(manifest["loss_ema"]), ema_initial=dict(manifest["ema_initial"]),
        metrics=list(manifest["metrics"]),
        audit=[MaskUpdateRecord(**r) for r in manifest["audit"]],
    )
    return state, config


def checkpoint_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.json", "state.bin"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
