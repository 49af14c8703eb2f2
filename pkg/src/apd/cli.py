"""Command-line entry point: run, eval, forget, metrics, pca."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint, metrics, runner
from .config import ConfigError, load_config
from .taskgen import load_csv_task


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    results = runner.execute(cfg)
    print(f"wrote {results}")
    return 0


def _cmd_eval(args) -> int:
    state = checkpoint.load(args.checkpoint)
    dataset = load_csv_task(args.data, task_id=args.task)
    acc = metrics.evaluate(state, args.task, dataset.features, dataset.labels)
    print(f"task {args.task}: accuracy {acc:.4f} on {dataset.features.shape[0]} samples")
    return 0


def _cmd_forget(args) -> int:
    state = checkpoint.load(args.checkpoint)
    forgotten = metrics.forget_task(state, args.task)
    checkpoint.save(forgotten, args.out)
    print(f"forgot task {args.task}; wrote {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    records = runner.records_from_logs(Path(args.results_dir))
    path = Path(args.results_dir) / "results.csv"
    runner.write_results(records, path)
    print(f"aggregated {len(records)} runs into {path}")
    return 0


def _cmd_pca(args) -> int:
    n = runner.export_pca(Path(args.run_log), Path(args.out))
    print(f"projected {n} trajectory points into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apd",
        description="Continual-learning experiments with additively decomposed parameters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment grid described by a config file")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpointed task on a CSV dataset")
    p.add_argument("checkpoint")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("forget", help="drop one task's parameters from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_forget)

    p = sub.add_parser("metrics", help="re-aggregate results.csv from run logs")
    p.add_argument("results_dir")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("pca", help="export 2-D parameter trajectories from a run log")
    p.add_argument("run_log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pca)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
