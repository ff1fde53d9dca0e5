"""Command line entry point.

Exit codes: 0 on success, 2 for usage or configuration problems, 3 for
numeric failures during training or evaluation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runs
from .config import load_run_config
from .data import ParseError, SchemaError
from .errors import (CheckpointError, ConfigError, DimensionError, EmptyBatchError, NumericError,
                     SelectionError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("harmask")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; keep flags long-form only
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)


def _task_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list of task ids")
    return items


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="harmask", description="Multi-task offline RL with per-task harmony masks.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate point-mass datasets for every task and regime")
    g.add_argument("--config", required=True, type=Path)

    t = sub.add_parser("train", help="train a model and its masks")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    t.add_argument("--seed", type=int, help="override the root seed of the config")
    t.add_argument("--threads", type=_positive)
    t.add_argument("--stop-at", type=_positive, help="stop after this round")
    t.add_argument("--checkpoint-every", type=_non_negative, default=0)

    e = sub.add_parser("eval", help="roll out a checkpoint on its training tasks")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--tasks", type=_task_list)
    e.add_argument("--episodes", type=_non_negative)
    e.add_argument("--seed", type=int)

    u = sub.add_parser("eval-unseen", help="evaluate held-out tasks under the voted mask")
    u.add_argument("--config", required=True, type=Path)
    u.add_argument("--checkpoint", type=Path)
    u.add_argument("--tasks", type=_task_list)
    u.add_argument("--thresh", type=_non_negative)
    u.add_argument("--episodes", type=_non_negative)
    u.add_argument("--seed", type=int)

    i = sub.add_parser("inspect-masks", help="pairwise Hamming distances and per-layer densities")
    i.add_argument("--checkpoint", required=True, type=Path)
    i.add_argument("--out", type=Path, help="output directory (default: next to the checkpoint)")
    return p


def _checkpoint(args, cfg) -> Path:
    return args.checkpoint if args.checkpoint is not None else runs.checkpoint_dir(cfg)


def _cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    for path in runs.gen_data(cfg):
        print(path)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    trainer = runs.train_run(cfg, resume=args.resume, stop_at=args.stop_at, seed=args.seed,
                             threads=args.threads, checkpoint_every=args.checkpoint_every)
    print(f"round {trainer.state.round}/{trainer.config.E}; outputs in {cfg.out_path}")
    return EXIT_OK


def _summary_line(task, rep) -> str:
    return f"{task:<16} {rep.mean_return:>10.3f} {rep.success_rate:>8.3f} {rep.episodes:>8d}"


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    reports = runs.evaluate(cfg, _checkpoint(args, cfg), tasks=args.tasks, episodes=args.episodes,
                            seed=args.seed)
    out = cfg.out_path / "eval"
    print(f"{'task':<16} {'return':>10} {'success':>8} {'episodes':>8}")
    for task, rep in reports.items():
        runs.atomic_write(out / f"{task}.json", runs.dump_json(rep.to_dict()))
        print(_summary_line(task, rep))
    if reports:
        mean_s = sum(r.success_rate for r in reports.values()) / len(reports)
        mean_r = sum(r.mean_return for r in reports.values()) / len(reports)
        print(f"{'mean':<16} {mean_r:>10.3f} {mean_s:>8.3f}")
        runs.atomic_write(out / "summary.json", runs.dump_json({
            "schema_version": runs.REPORT_SCHEMA_VERSION, "mean_success_rate": mean_s,
            "mean_return": mean_r, "tasks": sorted(reports)}))
    return EXIT_OK


def _cmd_eval_unseen(args) -> int:
    cfg = load_run_config(args.config)
    result = runs.evaluate_unseen(cfg, _checkpoint(args, cfg), thresh=args.thresh,
                                  episodes=args.episodes, seed=args.seed, tasks=args.tasks)
    out = cfg.out_path / "eval_unseen"
    runs.atomic_write(out / "summary.json", runs.dump_json(result))
    print(f"thresh {result['thresh']} of {result['n_tasks']} tasks, "
          f"voted density {result['voted_density']:.4f}")
    print(f"{'task':<16} {'voted':>10} {'random':>10}")
    for task, pair in result["tasks"].items():
        print(f"{task:<16} {pair['voted']['mean_return']:>10.3f} "
              f"{pair['random_control']['mean_return']:>10.3f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    ids, ham, rows = runs.inspect_masks(args.checkpoint)
    out = args.out if args.out is not None else args.checkpoint.parent / "inspect"
    runs.atomic_write(out / "hamming.csv", runs.hamming_csv(ids, ham))
    runs.atomic_write(out / "densities.csv", runs.densities_csv(rows))
    sys.stdout.write(runs.hamming_csv(ids, ham))
    return EXIT_OK


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval,
            "eval-unseen": _cmd_eval_unseen, "inspect-masks": _cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumericError, EmptyBatchError, SelectionError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DimensionError, ParseError, SchemaError,
            FileNotFoundError, PermissionError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
