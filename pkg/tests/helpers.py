"""Shared builders, oracles, and checkers used across the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from apd.numeric import grad_check
from apd.params import build_state, init_task, refresh_restore_targets
from apd.rng import rng_for
from apd.taskgen import TaskDataset, split
from apd.trainer import (
    HyperParams,
    _param_array,
    _standard_keys,
    loss_eq1,
    loss_eq2,
    loss_eq3,
)


def random_state(
    d: int = 4,
    widths=(5, 4),
    tasks: int = 2,
    classes: int = 3,
    seed: int = 0,
    activation: str = "tanh",
    use_masks: bool = True,
    randomize: bool = True,
):
    """A decomposed state with `tasks` initialized tasks and random parameters."""
    state = build_state(d, widths, seed=seed, use_masks=use_masks, activation=activation)
    rng = rng_for(seed, "test-random-state")
    for t in range(tasks):
        init_task(state, t, classes, rng_for(seed, "head", t), mode="zeros")
        if randomize:
            for layer in state.layers:
                layer.taus[t].weight_delta = 0.3 * rng.standard_normal(
                    layer.shared.weight.shape
                )
                layer.taus[t].bias_delta = 0.3 * rng.standard_normal(
                    layer.shared.bias.shape
                )
                layer.mask_logits[t].v = rng.standard_normal(layer.shared.bias.shape)
    return state


def toy_dataset(
    task_id: int = 0,
    classes: int = 3,
    per_class: int = 30,
    d: int = 6,
    seed: int = 0,
    noise: float = 0.15,
    ratios=(0.7, 0.0, 0.3),
):
    """One linearly separable Gaussian-cloud task with splits."""
    rng = rng_for(seed, "toy-task", task_id)
    protos = rng.standard_normal((classes, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    feats = np.concatenate(
        [protos[c] + noise * rng.standard_normal((per_class, d)) for c in range(classes)]
    )
    labels = np.concatenate([np.full(per_class, c, dtype=np.int64) for c in range(classes)])
    ds = TaskDataset(
        task_id=task_id,
        features=feats,
        labels=labels,
        num_classes=classes,
        train_idx=np.arange(feats.shape[0], dtype=np.int64),
    )
    return split(ds, ratios, seed)


def gradient_max_rel_error(objective_name: str, tasks: int, seed: int) -> float:
    """Finite-difference check of one randomized smooth-objective instance.

    Builds a 2-layer network (widths <= 8) with `tasks` initialized tasks,
    perturbs the live parameters off the restore targets so every adjoint is
    generically nonzero, and compares the analytic gradients of the smooth
    part against central differences.
    """
    state = random_state(
        d=int(rng_for(seed, "d").integers(3, 6)),
        widths=tuple(rng_for(seed, "w").integers(3, 9, 2)),
        tasks=tasks,
        seed=seed,
        activation="tanh",
    )
    if objective_name == "eq3" and tasks >= 2:
        from apd.params import LocalShared

        rng = rng_for(seed, "local")
        state.groups[0] = LocalShared(
            0,
            [0.2 * rng.standard_normal(l.shared.weight.shape) for l in state.layers],
            [0.2 * rng.standard_normal(l.shared.bias.shape) for l in state.layers],
        )
        state.assignment = {0: 0, 1: 0}
    refresh_restore_targets(state)
    drift_rng = rng_for(seed, "perturb")
    for layer in state.layers:
        layer.shared.weight += 0.05 * drift_rng.standard_normal(layer.shared.weight.shape)
        layer.shared.bias += 0.05 * drift_rng.standard_normal(layer.shared.bias.shape)
    task = tasks - 1
    batch_rng = rng_for(seed, "batch")
    x = batch_rng.standard_normal((5, state.input_dim))
    y = batch_rng.integers(0, 3, 5)
    hp = HyperParams(
        lambda1=float(rng_for(seed, "l1").uniform(0, 0.3)),
        lambda2=float(rng_for(seed, "l2").uniform(0.1, 5.0)),
    )
    objective = {"eq1": loss_eq1, "eq2": loss_eq2, "eq3": loss_eq3}[objective_name]
    keys = _standard_keys(state, task, objective_name)
    arrays = [_param_array(state, k) for k in keys]
    l1_tasks = [task] if objective_name == "eq1" else None

    def smooth(params):
        total, grads = objective((x, y), state, task, hp)
        tids = l1_tasks if l1_tasks is not None else state.task_order
        l1 = hp.lambda1 * sum(
            np.abs(l.taus[t].weight_delta).sum() + np.abs(l.taus[t].bias_delta).sum()
            for l in state.layers
            for t in tids
        )
        return total - l1, [grads[k] for k in keys]

    return grad_check(smooth, arrays, 1e-5)


def forgetting_oracle(acc: np.ndarray) -> tuple[float, float]:
    """Brute-force double loop over checkpoints."""
    T = acc.shape[0]
    per_task = []
    for t in range(T - 1):
        best = -np.inf
        for c in range(t, T):
            best = max(best, acc[c, t])
        per_task.append(best - acc[T - 1, t])
    return float(np.mean(per_task)), float(np.max(per_task))


def brute_force_two_partition(points) -> tuple[np.ndarray, float]:
    """Exhaustive best 2-partition by within-cluster squared distance."""
    n = len(points)
    X = np.stack(points)
    best, best_cost = None, np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if len(set(labels)) < 2:
            continue
        cost = 0.0
        for g in (0, 1):
            members = X[labels == g]
            cost += ((members - members.mean(axis=0)) ** 2).sum()
        if cost < best_cost:
            best_cost, best = cost, labels
    return best, best_cost
