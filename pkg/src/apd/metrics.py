"""Accuracy, capacity, order-robustness and forgetting measures.

Order-robustness of task t over R training orders is the spread of its final
accuracy, OPD_t = max_r P[t, r] - min_r P[t, r]; AOPD and MOPD are its mean
and max over tasks.  Forgetting of a task is its best accuracy at any
checkpoint from its own training onward minus its final accuracy.
Capacity counts exactly-nonzero stored parameters as a percentage of one
undecomposed base network (including one head); mask logits are counted
since they are stored per task.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .params import DecomposedState, forward
from .rng import rng_for

Array = np.ndarray


@dataclass
class PerformanceMatrix:
    """Accuracy history of one training sequence.

    ``acc[c, t]`` is the accuracy of task t (original id) after the
    checkpoint that finished training position c; nan where the task had not
    been seen yet.  Rows before a resume point may also be nan.
    """

    order: tuple[int, ...]
    acc: Array  # (positions, tasks)

    @property
    def num_tasks(self) -> int:
        return self.acc.shape[1]

    def final(self, task: int) -> float:
        return float(self.acc[-1, task])

    def final_row(self) -> Array:
        return self.acc[-1].copy()

    def arrival_view(self) -> Array:
        """Columns permuted into arrival order (column p = p-th trained task)."""
        return self.acc[:, list(self.order)]


def final_matrix(runs: list[PerformanceMatrix]) -> Array:
    """(tasks, orders) matrix of final accuracies across runs."""
    if not runs:
        raise ValueError("need at least one run")
    return np.stack([r.final_row() for r in runs], axis=1)


def evaluate(state: DecomposedState, task: int, features: Array, labels: Array) -> float:
    """Fraction of argmax-correct predictions; ties break to the lowest class."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(state, features, task)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == labels))


def opd(per_order_final: Array) -> float:
    values = np.asarray(per_order_final, dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"order disparity needs >= 2 orders, got {values.size}")
    return float(values.max() - values.min())


def aopd(final: Array) -> float:
    final = np.asarray(final, dtype=np.float64)
    if final.ndim != 2 or final.shape[1] < 2:
        raise ValueError(f"need a (tasks, >=2 orders) matrix, got shape {final.shape}")
    return float(np.mean([opd(row) for row in final]))


def mopd(final: Array) -> float:
    final = np.asarray(final, dtype=np.float64)
    if final.ndim != 2 or final.shape[1] < 2:
        raise ValueError(f"need a (tasks, >=2 orders) matrix, got shape {final.shape}")
    return float(np.max([opd(row) for row in final]))


def forgetting(acc: Array) -> tuple[float, float]:
    """(average, worst-case) forgetting of an arrival-ordered accuracy history.

    ``acc[c, t]`` is the accuracy of the t-th trained task after checkpoint c,
    for c >= t.  Forgetting of task t is its best accuracy at any checkpoint
    from its own training onward minus its final accuracy (zero when the
    final accuracy is the best); the last trained task is excluded from the
    aggregates.
    """
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise ValueError(f"need a square (checkpoints, tasks) matrix, got {acc.shape}")
    T = acc.shape[0]
    if T < 2:
        raise ValueError(f"forgetting needs >= 2 tasks, got {T}")
    for t in range(T):
        if np.any(np.isnan(acc[t:, t])):
            raise ValueError(f"missing accuracy for task column {t}")
    per_task = [float(acc[t:, t].max() - acc[T - 1, t]) for t in range(T - 1)]
    return float(np.mean(per_task)), float(np.max(per_task))


@dataclass
class CapacityReport:
    """Exact-nonzero parameter counts, per component."""

    shared: int
    locals: dict[int, int]
    taus: dict[int, int]
    masks: dict[int, int]
    heads: dict[int, int]
    base_count: int

    @property
    def total(self) -> int:
        return (
            self.shared
            + sum(self.locals.values())
            + sum(self.taus.values())
            + sum(self.masks.values())
            + sum(self.heads.values())
        )

    @property
    def percent(self) -> float:
        return 100.0 * self.total / self.base_count


def base_network_count(input_dim: int, widths: tuple[int, ...], n_classes: int) -> int:
    """Parameter count of one undecomposed network including one head."""
    total = 0
    fan_in = input_dim
    for w in widths:
        total += fan_in * w + w
        fan_in = w
    return total + fan_in * n_classes + n_classes


def capacity(state: DecomposedState, base_count: int) -> CapacityReport:
    if base_count <= 0:
        raise ValueError(f"base_count must be positive, got {base_count}")
    shared = sum(
        int(np.count_nonzero(l.shared.weight)) + int(np.count_nonzero(l.shared.bias))
        for l in state.layers
    )
    locals_ = {
        gid: sum(int(np.count_nonzero(w)) for w in grp.weights)
        + sum(int(np.count_nonzero(b)) for b in grp.biases)
        for gid, grp in state.groups.items()
    }
    taus: dict[int, int] = {}
    masks: dict[int, int] = {}
    for layer in state.layers:
        for tid, tau in layer.taus.items():
            taus[tid] = taus.get(tid, 0) + int(np.count_nonzero(tau.weight_delta)) + int(
                np.count_nonzero(tau.bias_delta)
            )
        for tid, logits in layer.mask_logits.items():
            masks[tid] = masks.get(tid, 0) + int(np.count_nonzero(logits.v))
    heads = {
        tid: int(np.count_nonzero(h.weight)) + int(np.count_nonzero(h.bias))
        for tid, h in state.heads.items()
    }
    return CapacityReport(shared, locals_, taus, masks, heads, base_count)


def forget_task(state: DecomposedState, task: int) -> DecomposedState:
    """Copy of the state with the task's delta, mask and head removed.

    Shared and locally-shared parameters are untouched, so the remaining
    tasks' outputs are bit-identical; evaluating the forgotten task raises.
    """
    if task not in state.heads:
        raise KeyError(f"unknown task {task}")
    out = copy.deepcopy(state)
    for layer in out.layers:
        layer.taus.pop(task, None)
        layer.mask_logits.pop(task, None)
    del out.heads[task]
    out.assignment.pop(task, None)
    out.restored.pop(task, None)
    out.task_order = [t for t in out.task_order if t != task]
    return out


# -----------------------------------------------------------------------
# 2-D PCA via power iteration
# -----------------------------------------------------------------------

_PCA_TOL = 1e-10
_PCA_MAX_ITER = 1000


def _power_component(cov: Array, prev: list[Array], rng) -> tuple[Array, float]:
    d = cov.shape[0]
    v = rng.standard_normal(d)
    for p in prev:
        v -= (v @ p) * p
    v /= np.linalg.norm(v)
    for _ in range(_PCA_MAX_ITER):
        w = cov @ v
        for p in prev:
            w -= (w @ p) * p
        nrm = np.linalg.norm(w)
        if nrm < 1e-300:
            break  # eigenvalue ~ 0; current v is a valid null-direction
        w /= nrm
        if np.linalg.norm(w - v) < _PCA_TOL:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def pca2d(trajectory) -> Array:
    """Project parameter vectors onto their top-2 principal directions.

    Components are computed by power iteration with deflation; the sign
    convention makes the first nonzero loading of each component positive.
    """
    X = np.asarray(list(trajectory), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError(f"need >= 3 vectors of equal length, got shape {X.shape}")
    if X.shape[1] < 2:
        raise ValueError("need at least 2-dimensional vectors")
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (X.shape[0] - 1)
    if not np.any(cov):
        raise ValueError("rank-0 data: all vectors identical")
    rng = rng_for(0, "pca-start")
    components = []
    prev: list[Array] = []
    for _ in range(2):
        v, lam = _power_component(cov, prev, rng)
        cov = cov - lam * np.outer(v, v)
        first = np.flatnonzero(np.abs(v) > 1e-12)
        if first.size and v[first[0]] < 0:
            v = -v
        components.append(v)
        prev.append(v)
    return Xc @ np.stack(components, axis=1)


def path_length(points: Array) -> float:
    """Total euclidean length of a polyline of row points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
