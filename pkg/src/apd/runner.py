"""Experiment orchestration over (variant x order x seed) grids.

Each run writes a JSON-lines log (epoch losses, per-checkpoint accuracies,
parameter trajectories) plus a final checkpoint; the grid aggregates into
results.csv with one row per (variant, order, seed, task).  Runs are pure
functions of the config, so reruns are byte-identical; APD_THREADS caps the
worker pool.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint, metrics
from .config import ExperimentConfig
from .taskgen import (
    TaskDataset,
    fixture_order_names,
    fixture_orders,
    gen_stream,
    load_csv_tasks,
    orders as random_orders,
    split,
)
from .trainer import Variant, run_sequence

RESULT_COLUMNS = [
    "variant",
    "order_id",
    "seed",
    "task",
    "final_accuracy",
    "capacity_pct",
    "opd",
    "aopd",
    "mopd",
    "avg_forgetting",
    "worst_forgetting",
]


@dataclass
class RunRecord:
    """Everything the aggregate needs from one finished run."""

    variant: str
    order_id: int
    seed: int
    final_accuracy: dict[int, float]
    capacity_percent: float
    avg_forgetting: float | None
    worst_forgetting: float | None


def tasks_for_seed(cfg: ExperimentConfig, seed: int) -> list[TaskDataset]:
    """The (split) task list a given run seed trains on."""
    if cfg.csv_paths:
        tasks = load_csv_tasks(cfg.csv_paths)
    else:
        stream_seed = cfg.stream.seed if cfg.stream_seed_fixed else seed
        tasks = gen_stream(replace(cfg.stream, seed=stream_seed))
    return [split(t, cfg.ratios, seed) for t in tasks]


def resolve_orders(cfg: ExperimentConfig, T: int) -> list[tuple[int, ...]]:
    if cfg.orders_mode == "fixtures":
        fixtures = [fixture_orders(name) for name in fixture_order_names(T)]
        return fixtures
    return random_orders(T, cfg.orders_count, cfg.order_seed)


def _run_name(variant: str, order_id: int, seed: int) -> str:
    return f"{variant}__order{order_id}__seed{seed}"


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def run_one(
    cfg: ExperimentConfig,
    variant: Variant,
    order_id: int,
    order: tuple[int, ...],
    seed: int,
    tasks: list[TaskDataset],
) -> tuple[RunRecord, str, bytes]:
    """Execute one run; returns its record, JSONL log text, checkpoint bytes."""
    hp = cfg.hyper_for(variant, seed)
    result = run_sequence(
        tasks, order, hp, variant, widths=cfg.widths, activation=cfg.activation
    )
    lines = [
        _json_line(
            {
                "kind": "run",
                "variant": variant.label,
                "order_id": order_id,
                "order": list(order),
                "seed": seed,
                "widths": list(cfg.widths),
                "tasks": len(tasks),
            }
        )
    ]
    for entry in result.epoch_logs:
        lines.append(_json_line({"kind": "epoch", **entry}))
    T = len(tasks)
    for pos in range(T):
        row = result.performance.acc[pos]
        accs = {str(t): float(row[t]) for t in range(T) if not np.isnan(row[t])}
        lines.append(_json_line({"kind": "eval", "position": pos, "accuracies": accs}))
    if cfg.log_trajectory:
        for entry in result.trajectory:
            series = {name: vec.tolist() for name, vec in sorted(entry["series"].items())}
            lines.append(
                _json_line(
                    {"kind": "trajectory", "position": entry["position"], "series": series}
                )
            )

    base = metrics.base_network_count(
        tasks[0].features.shape[1], cfg.widths, tasks[0].num_classes
    )
    report = metrics.capacity(result.state, base)
    avg_f = worst_f = None
    if T >= 2:
        avg_f, worst_f = metrics.forgetting(result.performance.arrival_view())
    final_acc = {t: result.performance.final(t) for t in range(T)}
    lines.append(
        _json_line(
            {
                "kind": "final",
                "final_accuracy": {str(t): a for t, a in final_acc.items()},
                "capacity_percent": report.percent,
                "capacity_total": report.total,
                "avg_forgetting": avg_f,
                "worst_forgetting": worst_f,
            }
        )
    )
    record = RunRecord(
        variant=variant.label,
        order_id=order_id,
        seed=seed,
        final_accuracy=final_acc,
        capacity_percent=report.percent,
        avg_forgetting=avg_f,
        worst_forgetting=worst_f,
    )
    return record, "\n".join(lines) + "\n", checkpoint.dumps(result.state)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def results_rows(records: list[RunRecord]) -> list[list[str]]:
    """Aggregate run records into results.csv rows (sorted, deterministic)."""
    order_ids = sorted({r.order_id for r in records})
    R = len(order_ids)
    by_key = {(r.variant, r.order_id, r.seed): r for r in records}
    disparity: dict[tuple[str, int], tuple[dict[int, float], float, float]] = {}
    if R >= 2:
        for variant, seed in sorted({(r.variant, r.seed) for r in records}):
            runs = [by_key[(variant, oid, seed)] for oid in order_ids]
            tasks = sorted(runs[0].final_accuracy)
            final = np.array(
                [[run.final_accuracy[t] for run in runs] for t in tasks]
            )
            per_task = {t: metrics.opd(final[i]) for i, t in enumerate(tasks)}
            disparity[(variant, seed)] = (per_task, metrics.aopd(final), metrics.mopd(final))
    rows = []
    for record in sorted(records, key=lambda r: (r.variant, r.order_id, r.seed)):
        spread = disparity.get((record.variant, record.seed))
        for task in sorted(record.final_accuracy):
            rows.append(
                [
                    record.variant,
                    str(record.order_id),
                    str(record.seed),
                    str(task),
                    _fmt(record.final_accuracy[task]),
                    _fmt(record.capacity_percent),
                    _fmt(spread[0][task]) if spread else "",
                    _fmt(spread[1]) if spread else "",
                    _fmt(spread[2]) if spread else "",
                    _fmt(record.avg_forgetting),
                    _fmt(record.worst_forgetting),
                ]
            )
    return rows


def write_results(records: list[RunRecord], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    writer.writerows(results_rows(records))
    path.write_text(buf.getvalue(), encoding="utf-8")


def _worker_count(n_jobs: int) -> int:
    workers = os.cpu_count() or 1
    cap = os.environ.get("APD_THREADS")
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"APD_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(workers, n_jobs))


def execute(cfg: ExperimentConfig) -> Path:
    """Run the whole grid; returns the results.csv path."""
    out_dir = Path(cfg.out_dir)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    tasks_by_seed = {seed: tasks_for_seed(cfg, seed) for seed in cfg.seeds}
    T = len(next(iter(tasks_by_seed.values())))
    order_list = resolve_orders(cfg, T)

    jobs = [
        (variant, oid, order, seed)
        for variant in cfg.variants
        for oid, order in enumerate(order_list)
        for seed in cfg.seeds
    ]

    def _job(args):
        variant, oid, order, seed = args
        return run_one(cfg, variant, oid, order, seed, tasks_by_seed[seed])

    workers = _worker_count(len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, jobs))
    else:
        outcomes = [_job(j) for j in jobs]

    records = []
    for (variant, oid, order, seed), (record, log_text, ckpt) in zip(jobs, outcomes):
        name = _run_name(variant.label, oid, seed)
        (runs_dir / f"{name}.jsonl").write_text(log_text, encoding="utf-8")
        (runs_dir / f"{name}.ckpt").write_bytes(ckpt)
        records.append(record)

    results_path = out_dir / "results.csv"
    write_results(records, results_path)
    return results_path


def records_from_logs(results_dir: Path) -> list[RunRecord]:
    """Rebuild run records from the JSONL logs under <results-dir>/runs."""
    runs_dir = Path(results_dir) / "runs"
    logs = sorted(runs_dir.glob("*.jsonl"))
    if not logs:
        raise FileNotFoundError(f"no run logs found under {runs_dir}")
    records = []
    for log in logs:
        header = final = None
        with open(log, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["kind"] == "run":
                    header = rec
                elif rec["kind"] == "final":
                    final = rec
        if header is None or final is None:
            raise ValueError(f"{log}: missing run header or final record")
        records.append(
            RunRecord(
                variant=header["variant"],
                order_id=int(header["order_id"]),
                seed=int(header["seed"]),
                final_accuracy={int(t): a for t, a in final["final_accuracy"].items()},
                capacity_percent=final["capacity_percent"],
                avg_forgetting=final["avg_forgetting"],
                worst_forgetting=final["worst_forgetting"],
            )
        )
    return records


def export_pca(log_path: Path, out_csv: Path) -> int:
    """Project a run log's parameter trajectories to 2-D; returns #points."""
    names: list[tuple[str, int]] = []
    vectors: list[list[float]] = []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") != "trajectory":
                continue
            for series in sorted(rec["series"]):
                names.append((series, int(rec["position"])))
                vectors.append(rec["series"][series])
    if len(vectors) < 3:
        raise ValueError(f"{log_path}: fewer than 3 trajectory points")
    points = metrics.pca2d(np.asarray(vectors))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series", "position", "x", "y"])
    for (series, pos), (x, y) in zip(names, points):
        writer.writerow([series, str(pos), repr(float(x)), repr(float(y))])
    Path(out_csv).write_text(buf.getvalue(), encoding="utf-8")
    return len(vectors)
