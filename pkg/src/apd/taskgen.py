"""Deterministic synthetic task streams, stratified splits, and task orders.

Tasks are Gaussian clouds around unit-norm class prototypes.  Relatedness is
the fraction of class prototypes drawn from a global basis shared by every
task (rounded to the nearest class count); the remaining classes point in
task-private (or family-private) directions.  Relatedness 1 makes every task
identical up to noise, relatedness 0 makes prototype sets pairwise
independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import rng_for

Array = np.ndarray

# relative spread of task prototypes around their (sub)family direction
FAMILY_SPREAD = 0.1
# family prototypes deviate this far from the global basis; anchoring them
# to the basis keeps the same hidden units responsible across a family
FAMILY_DEVIATION = 0.8
# each family has two coherent sub-variants this far apart; with tasks
# arriving family-blocked this gives 2*(families seen) natural clusters
SUBFAMILY_SPREAD = 0.4


@dataclass
class TaskDataset:
    task_id: int
    features: Array           # (n, d)
    labels: Array             # (n,) int64
    num_classes: int
    train_idx: Array = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    val_idx: Array = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_idx: Array = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def split_arrays(self, which: str) -> tuple[Array, Array]:
        idx = getattr(self, f"{which}_idx")
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True)
class StreamSpec:
    tasks: int
    dim: int
    classes: int
    samples_per_class: int
    relatedness: float = 0.5
    noise: float = 0.15
    families: int = 0          # 0: every task gets its own latent directions
    family_spread: float = FAMILY_SPREAD
    seed: int = 0

    def validate(self) -> None:
        if min(self.tasks, self.dim, self.classes, self.samples_per_class) < 1:
            raise ValueError("tasks, dim, classes and samples_per_class must all be >= 1")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError(f"relatedness must lie in [0, 1], got {self.relatedness}")
        if self.noise < 0 or self.families < 0 or self.family_spread < 0:
            raise ValueError("noise, families and family_spread must be non-negative")
        if self.classes > 2 ** self.dim:
            raise ValueError(
                f"{self.classes} classes are not representable in {self.dim} dimensions"
            )


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> Array:
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_stream(spec: StreamSpec) -> list[TaskDataset]:
    """Generate the task stream described by `spec`; deterministic in its seed."""
    spec.validate()
    shared = _unit_rows(rng_for(spec.seed, "shared-basis"), spec.classes, spec.dim)
    sub_dirs = None
    if spec.families > 0:
        sub_dirs = {}
        for f in range(spec.families):
            base = FAMILY_DEVIATION * _unit_rows(
                rng_for(spec.seed, "family", f), spec.classes, spec.dim
            )
            for sub in range(2):
                lobe = shared + base + SUBFAMILY_SPREAD * _unit_rows(
                    rng_for(spec.seed, "subfamily", f, sub), spec.classes, spec.dim
                )
                sub_dirs[(f, sub)] = lobe / np.linalg.norm(lobe, axis=1, keepdims=True)
    n_shared = int(round(spec.relatedness * spec.classes))
    family_of = [t * spec.families // spec.tasks for t in range(spec.tasks)] if spec.families else []
    datasets = []
    for t in range(spec.tasks):
        private = _unit_rows(rng_for(spec.seed, "task-dirs", t), spec.classes, spec.dim)
        if sub_dirs is not None:
            # tasks arrive family-blocked; each family block halves into two
            # coherent sub-variants
            fam = family_of[t]
            block = [i for i, f in enumerate(family_of) if f == fam]
            sub = 0 if block.index(t) < (len(block) + 1) // 2 else 1
            mixed = sub_dirs[(fam, sub)] + spec.family_spread * private
            private = mixed / np.linalg.norm(mixed, axis=1, keepdims=True)
        prototypes = private.copy()
        prototypes[:n_shared] = shared[:n_shared]
        sample_rng = rng_for(spec.seed, "samples", t)
        feats = []
        labels = []
        for c in range(spec.classes):
            noise = sample_rng.standard_normal((spec.samples_per_class, spec.dim))
            feats.append(prototypes[c] + spec.noise * noise)
            labels.append(np.full(spec.samples_per_class, c, dtype=np.int64))
        features = np.concatenate(feats)
        n = features.shape[0]
        datasets.append(
            TaskDataset(
                task_id=t,
                features=features,
                labels=np.concatenate(labels),
                num_classes=spec.classes,
                train_idx=np.arange(n, dtype=np.int64),
            )
        )
    return datasets


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    short = n - sum(counts)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def split(dataset: TaskDataset, ratios: tuple[float, float, float], seed: int) -> TaskDataset:
    """Stratified train/val/test split; per-class counts follow the ratios
    by the largest-remainder rule."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative, got {ratios}")
    parts = sum(1 for r in ratios if r > 0)
    buckets: list[list[Array]] = [[], [], []]
    for c in range(dataset.num_classes):
        cls_idx = np.flatnonzero(dataset.labels == c)
        if cls_idx.size < parts:
            raise ValueError(
                f"class {c} has {cls_idx.size} samples, fewer than {parts} split parts"
            )
        perm = rng_for(seed, "split", dataset.task_id, c).permutation(cls_idx)
        counts = _largest_remainder(cls_idx.size, ratios)
        start = 0
        for si, cnt in enumerate(counts):
            buckets[si].append(perm[start : start + cnt])
            start += cnt
    tr, va, te = (
        np.sort(np.concatenate(b)).astype(np.int64) if b else np.empty(0, dtype=np.int64)
        for b in buckets
    )
    return replace(dataset, train_idx=tr, val_idx=va, test_idx=te)


def orders(T: int, R: int, seed: int) -> list[tuple[int, ...]]:
    """R task orders; the identity is always order 0, the rest are seeded."""
    if R < 1:
        raise ValueError(f"need at least one order, got R={R}")
    out = [tuple(range(T))]
    for r in range(1, R):
        out.append(tuple(int(i) for i in rng_for(seed, "order", r).permutation(T)))
    return out


_FIXTURE_ORDERS: dict[str, tuple[int, ...]] = {
    "T10-orderA": (0, 1, 2, 3, 4, 5, 6, 7, 8, 9),
    "T10-orderB": (1, 7, 4, 5, 2, 0, 8, 6, 9, 3),
    "T10-orderC": (7, 0, 5, 1, 8, 4, 3, 6, 2, 9),
    "T10-orderD": (5, 8, 2, 9, 0, 4, 3, 7, 6, 1),
    "T10-orderE": (2, 9, 5, 4, 8, 0, 6, 1, 3, 7),
    "T20-orderA": tuple(range(20)),
    "T20-orderB": (15, 12, 5, 9, 7, 16, 18, 17, 1, 0, 3, 8, 11, 14, 10, 6, 2, 4, 13, 19),
    "T20-orderC": (17, 1, 19, 18, 12, 7, 6, 0, 11, 15, 10, 5, 13, 3, 9, 16, 4, 14, 2, 8),
    "T20-orderD": (11, 9, 6, 5, 12, 4, 0, 10, 13, 7, 14, 3, 15, 16, 8, 1, 2, 19, 18, 17),
    "T20-orderE": (6, 14, 0, 11, 12, 17, 13, 4, 9, 1, 7, 19, 8, 10, 3, 15, 18, 5, 2, 16),
}


def fixture_orders(name: str) -> tuple[int, ...]:
    """One of the preset task orders (T10-orderA..E, T20-orderA..E)."""
    if name not in _FIXTURE_ORDERS:
        known = ", ".join(sorted(_FIXTURE_ORDERS))
        raise ValueError(f"unknown order fixture {name!r}; known fixtures: {known}")
    return _FIXTURE_ORDERS[name]


def fixture_order_names(T: int) -> list[str]:
    names = [n for n in sorted(_FIXTURE_ORDERS) if n.startswith(f"T{T}-")]
    if not names:
        raise ValueError(f"no order fixtures for T={T}")
    return names


def load_csv_task(path: str, task_id: int) -> TaskDataset:
    """One task from a CSV file: header row, then integer label + features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    labels = []
    feats = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    features = np.asarray(feats, dtype=np.float64)
    labels_arr = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError(f"{path}: rows must have a label plus at least one feature")
    if not np.all(np.isfinite(features)):
        raise ValueError(f"{path}: non-finite feature values")
    if labels_arr.min() < 0:
        raise ValueError(f"{path}: labels must be non-negative class indices")
    n = features.shape[0]
    return TaskDataset(
        task_id=task_id,
        features=features,
        labels=labels_arr,
        num_classes=int(labels_arr.max()) + 1,
        train_idx=np.arange(n, dtype=np.int64),
    )


def load_csv_tasks(paths: list[str]) -> list[TaskDataset]:
    """CSV tasks in file order; the position in the list is the task id."""
    return [load_csv_task(p, i) for i, p in enumerate(paths)]
