"""File-level operations behind the command line: data generation, training,
evaluation on seen and held-out tasks, and mask inspection."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .config import RunConfigFile, TrainConfig
from .data import TaskDataset, load_jsonl, save_jsonl
from .envs import (REGIMES, EvalReport, PointTaskSpec, expert_mean_return, gen_dataset, rollout,
                   success_threshold)
from .errors import ConfigError
from .mask_update import default_thresh, unseen_mask
from .model import build_layout
from .params import erk_densities, mask_hamming_matrix, segment_densities
from .trainer import (Trainer, audit_jsonl, load_checkpoint, metrics_csv, save_checkpoint)

log = logging.getLogger(__name__)

HEADER_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# data ------------------------------------------------------------------------

def dataset_path(cfg: RunConfigFile, regime: str, task_id: str) -> Path:
    return cfg.data_path / regime / f"{task_id}.jsonl"


def header_path(cfg: RunConfigFile) -> Path:
    return cfg.data_path / "header.json"


def gen_data(cfg: RunConfigFile) -> list[Path]:
    """Write one JSONL file per training task and regime plus a header."""
    specs = cfg.suite.specs()
    written = []
    header = {"schema_version": HEADER_SCHEMA_VERSION, "seed": cfg.seed,
              "n_traj": cfg.suite.n_traj, "regimes": list(REGIMES),
              "held_out": sorted(cfg.suite.held_out), "tasks": {}}
    ordered = [t.task_id for t in cfg.suite.tasks]
    for idx, task_id in enumerate(ordered):
        spec = specs[task_id]
        expert = expert_mean_return(spec, seed=seeding.int_seed(cfg.seed, "data", idx, 99))
        header["tasks"][task_id] = {**spec.to_dict(), "expert_mean_return": expert,
                                    "success_threshold": success_threshold(expert)}
        if task_id in cfg.suite.held_out:
            continue
        for r_idx, regime in enumerate(REGIMES):
            ds = gen_dataset(spec, cfg.suite.n_traj, regime,
                             seeding.stream_seed(cfg.seed, "data", idx, r_idx))
            path = dataset_path(cfg, regime, task_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_jsonl([ds], path)
            written.append(path)
    atomic_write(header_path(cfg), dump_json(header))
    written.append(header_path(cfg))
    return written


def read_header(cfg: RunConfigFile) -> dict:
    path = header_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"dataset header {path} is missing; run gen-data first")
    return json.loads(path.read_text())


def load_task_dataset(cfg: RunConfigFile, task_id: str, regime: Optional[str] = None) -> TaskDataset:
    regime = regime or cfg.suite.regime
    path = dataset_path(cfg, regime, task_id)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} is missing; run gen-data first")
    spec = cfg.suite.specs()[task_id]
    found = load_jsonl(path, gamma=spec.gamma)
    if len(found) != 1 or found[0].task_id != task_id:
        raise ConfigError(f"{path} does not hold exactly the trajectories of {task_id!r}")
    return found[0]


# training --------------------------------------------------------------------

def train_config(cfg: RunConfigFile, seed: Optional[int] = None,
                 threads: Optional[int] = None) -> TrainConfig:
    update = {"seed": cfg.seed if seed is None else seed}
    if threads is not None:
        update["threads"] = threads
    return cfg.train.model_copy(update=update)


def checkpoint_dir(cfg: RunConfigFile) -> Path:
    return cfg.out_path / "checkpoint"


def write_train_outputs(trainer: Trainer, out_dir: Path) -> None:
    save_checkpoint(trainer.state, trainer.config, out_dir / "checkpoint")
    atomic_write(out_dir / "metrics.csv", metrics_csv(trainer.state.metrics))
    atomic_write(out_dir / "mask_audit.jsonl", audit_jsonl(trainer.state.audit))


def train_run(cfg: RunConfigFile, resume: Optional[Path] = None, stop_at: Optional[int] = None,
              seed: Optional[int] = None, threads: Optional[int] = None,
              checkpoint_every: int = 0) -> Trainer:
    datasets = [load_task_dataset(cfg, t) for t in cfg.suite.train_ids()]
    if resume is not None:
        state, tc = load_checkpoint(resume)
        if threads is not None:
            tc = tc.model_copy(update={"threads": threads})
        trainer = Trainer(tc, datasets, state=state)
    else:
        trainer = Trainer(train_config(cfg, seed, threads), datasets)
    out = cfg.out_path
    target = trainer.config.E if stop_at is None else min(stop_at, trainer.config.E)
    while trainer.state.round < target:
        nxt = target
        if checkpoint_every > 0:
            nxt = min(target, (trainer.state.round // checkpoint_every + 1) * checkpoint_every)
        trainer.run(until=nxt)
        write_train_outputs(trainer, out)
    if trainer.state.round == target and not (out / "checkpoint").exists():
        write_train_outputs(trainer, out)
    return trainer


# evaluation ------------------------------------------------------------------

def _task_info(header: dict, task_id: str) -> dict:
    try:
        return header["tasks"][task_id]
    except KeyError:
        raise ConfigError(f"task {task_id!r} is not in the dataset header") from None


def evaluate(cfg: RunConfigFile, checkpoint: Path, tasks: Optional[Sequence[str]] = None,
             episodes: Optional[int] = None, seed: Optional[int] = None) -> dict[str, EvalReport]:
    state, tc = load_checkpoint(checkpoint)
    header = read_header(cfg)
    model_cfg = tc.model_cfg()
    known = sorted(state.masks.masks)
    tasks = list(tasks) if tasks else known
    unknown = [t for t in tasks if t not in known]
    if unknown:
        raise ConfigError(f"unknown task ids {unknown}; checkpoint has {known}")
    episodes = cfg.eval.episodes if episodes is None else episodes
    root = cfg.seed if seed is None else seed
    specs = cfg.suite.specs()
    reports = {}
    for task in tasks:
        info = _task_info(header, task)
        spec = specs[task]
        reports[task] = rollout(
            state.theta, model_cfg, state.masks[task], spec, load_task_dataset(cfg, task),
            info["expert_mean_return"], episodes,
            seeding.stream_seed(root, "eval", known.index(task)),
            threshold=info["success_threshold"])
    return reports


def random_control_mask(n_params: int, n_active: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    bits = np.zeros(n_params, dtype=bool)
    bits[rng.choice(n_params, size=n_active, replace=False)] = True
    return bits


def evaluate_unseen(cfg: RunConfigFile, checkpoint: Path, thresh: Optional[int] = None,
                    episodes: Optional[int] = None, seed: Optional[int] = None,
                    tasks: Optional[Sequence[str]] = None) -> dict:
    """Evaluate held-out tasks under the voted mask and a sparsity-matched random mask."""
    state, tc = load_checkpoint(checkpoint)
    header = read_header(cfg)
    model_cfg = tc.model_cfg()
    n = len(state.masks)
    thresh = default_thresh(n) if thresh is None else thresh
    voted = unseen_mask(state.masks, thresh)
    episodes = cfg.eval.episodes if episodes is None else episodes
    root = cfg.seed if seed is None else seed
    held = list(tasks) if tasks else sorted(cfg.suite.held_out)
    specs = cfg.suite.specs()
    unknown = [t for t in held if t not in specs]
    if unknown:
        raise ConfigError(f"unknown task ids {unknown}")
    control = random_control_mask(voted.size, int(voted.sum()),
                                  seeding.stream_seed(root, "control"))
    out = {"schema_version": REPORT_SCHEMA_VERSION, "thresh": thresh, "n_tasks": n,
           "voted_density": float(voted.mean()), "tasks": {}}
    all_ids = [t.task_id for t in cfg.suite.tasks]
    for task in held:
        info = _task_info(header, task)
        spec = specs[task]
        idx = all_ids.index(task)
        demos = gen_dataset(spec, cfg.eval.unseen_prompt_traj, "near_optimal",
                            seeding.stream_seed(root, "eval", idx, 1))
        run_seed = seeding.stream_seed(root, "eval", idx, 2)
        rep_v = rollout(state.theta, model_cfg, voted, spec, demos, info["expert_mean_return"],
                        episodes, run_seed, threshold=info["success_threshold"])
        rep_c = rollout(state.theta, model_cfg, control, spec, demos,
                        info["expert_mean_return"], episodes, run_seed,
                        threshold=info["success_threshold"])
        out["tasks"][task] = {"voted": rep_v.to_dict(), "random_control": rep_c.to_dict()}
    return out


# inspection ------------------------------------------------------------------

def inspect_masks(checkpoint: Path) -> tuple[list[str], np.ndarray, list[dict]]:
    state, tc = load_checkpoint(checkpoint)
    layout = build_layout(tc.model_cfg())
    ids = state.masks.task_ids
    ham = mask_hamming_matrix(state.masks)
    targets = state.masks.densities or erk_densities(layout, state.masks.sparsity)
    rows = []
    for t in ids:
        dens = segment_densities(layout, state.masks[t])
        for seg in layout.segments:
            rows.append({"task_id": t, "segment": seg.name, "size": seg.size,
                         "density": dens[seg.name], "erk_density": targets.get(seg.name, 1.0)})
    return ids, ham, rows


def hamming_csv(ids: Sequence[str], ham: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", *ids])
    for t, row in zip(ids, ham):
        w.writerow([t, *(repr(float(x)) for x in row)])
    return buf.getvalue()


def densities_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["task_id", "segment", "size", "density", "erk_density"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in cols})
    return buf.getvalue()
