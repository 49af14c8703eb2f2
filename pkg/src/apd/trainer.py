"""Training objectives, the proximal sparsifier, and the sequence driver.

Three objectives are supported beyond plain supervised training:

* anchored: data loss + lambda1*|delta_t|_1 + lambda2*|shared - snapshot|^2
  (the shared weights are pulled toward their value at task arrival);
* retroactive: data loss + lambda1*sum_i |delta_i|_1 + lambda2*sum_{i<t}
  |target_i - composed_i|^2, where the frozen targets are the per-task dense
  weights recovered at task arrival and every earlier task's delta and mask
  keep training so its composition tracks its target;
* retroactive with locally-shared arrays folded into the deltas (the
  consolidated variant); with no groups present it is bit-identical to the
  plain retroactive objective.

The L1 term is never differentiated: after every SGD step each trainable
delta goes through soft-thresholding, which is what produces exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .consolidation import consolidate
from .numeric import ACTIVATIONS, GradTape, Var, cross_entropy_mean
from .params import (
    DecomposedState,
    LayerMaskLogits,
    LayerTaskAdaptive,
    build_state,
    composed_network,
    flatten_pairs,
    init_task,
    new_head,
    refresh_restore_targets,
)
from .rng import rng_for
from .taskgen import TaskDataset

Array = np.ndarray

# Mask logit adopted by the first trained task: its mask saturates to ~1 so
# the composed weights coincide with the plainly-trained shared weights.
FIRST_TASK_MASK_LOGIT = 30.0

VARIANT_KINDS = ("L2T", "APD-Fixed", "APD1", "APD2")

_KIND_ALIASES = {
    "l2t": "L2T",
    "l2t-baseline": "L2T",
    "apd-fixed": "APD-Fixed",
    "apdfixed": "APD-Fixed",
    "apd-fixed-baseline": "APD-Fixed",
    "apd1": "APD1",
    "apd(1)": "APD1",
    "apd2": "APD2",
    "apd(2)": "APD2",
}

_FLAG_ALIASES = {
    "no_sparsity": "no_sparsity",
    "no_adaptive_mask": "no_adaptive_mask",
    "no_mask": "no_adaptive_mask",
    "fixed_shared": "fixed_shared",
}


@dataclass(frozen=True)
class HyperParams:
    lambda1: float = 6e-4
    lambda2: float = 100.0
    lr0: float = 0.1
    lr_decay: float = 0.95
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    beta: float = 1e-2
    s: int = 5
    k: int = 2
    K0: int = 2
    tau_init: str = "copy-shared"
    seed: int = 0

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.beta) < 0:
            raise ValueError("lambda1, lambda2 and beta must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if min(self.s, self.k, self.K0) < 1:
            raise ValueError("s, k and K0 must all be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.tau_init not in ("copy-shared", "zeros"):
            raise ValueError(f"unknown tau_init {self.tau_init!r}")


@dataclass(frozen=True)
class Variant:
    """Training variant: the objective kind plus ablation flags."""

    kind: str = "APD1"
    no_sparsity: bool = False
    no_adaptive_mask: bool = False
    fixed_shared: bool = False

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.kind == "L2T" and (self.no_sparsity or self.no_adaptive_mask or self.fixed_shared):
            raise ValueError("ablation flags do not apply to the L2T baseline")

    @property
    def decomposed(self) -> bool:
        return self.kind != "L2T"

    @property
    def retroactive(self) -> bool:
        return self.kind in ("APD1", "APD2")

    @property
    def consolidates(self) -> bool:
        return self.kind == "APD2"

    @property
    def label(self) -> str:
        flags = [
            name
            for name, on in (
                ("no_sparsity", self.no_sparsity),
                ("no_adaptive_mask", self.no_adaptive_mask),
                ("fixed_shared", self.fixed_shared),
            )
            if on
        ]
        return "+".join([self.kind] + flags)

    @classmethod
    def parse(cls, text: str) -> "Variant":
        parts = [p.strip() for p in text.split("+") if p.strip()]
        if not parts:
            raise ValueError("empty variant string")
        kind_key = parts[0].lower().replace("_", "-")
        kind = _KIND_ALIASES.get(kind_key)
        if kind is None:
            raise ValueError(f"unknown variant {parts[0]!r}; known kinds: {VARIANT_KINDS}")
        flags = {}
        for p in parts[1:]:
            flag = _FLAG_ALIASES.get(p.lower().replace("-", "_"))
            if flag is None:
                raise ValueError(f"unknown variant flag {p!r}")
            flags[flag] = True
        return cls(kind=kind, **flags)


def proximal_l1(values: Array, threshold: float) -> Array:
    """Soft-threshold every coordinate by `threshold` (= lambda1 * lr)."""
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.maximum(np.abs(values) - threshold, 0.0)


# -----------------------------------------------------------------------
# objective graphs
# -----------------------------------------------------------------------

ParamKey = tuple


def _param_array(state: DecomposedState, key: ParamKey) -> Array:
    kind = key[0]
    if kind == "sigma":
        shared = state.layers[key[1]].shared
        return shared.weight if key[2] == "w" else shared.bias
    if kind == "tau":
        tau = state.layers[key[1]].taus[key[2]]
        return tau.weight_delta if key[3] == "w" else tau.bias_delta
    if kind == "v":
        return state.layers[key[1]].mask_logits[key[2]].v
    if kind == "head":
        head = state.heads[key[1]]
        return head.weight if key[2] == "w" else head.bias
    raise KeyError(f"unknown parameter key {key}")


def _collect_keys(
    state: DecomposedState, task: int, objective: str, variant: Variant
) -> list[ParamKey]:
    keys: list[ParamKey] = []
    sigma_trainable = objective == "plain" or not variant.fixed_shared
    if sigma_trainable:
        for li in range(state.num_layers):
            keys += [("sigma", li, "w"), ("sigma", li, "b")]
    if objective == "eq1":
        per_task = [task]
    elif objective in ("eq2", "eq3"):
        per_task = list(state.task_order)
    else:
        per_task = []
    for li in range(state.num_layers):
        for tid in per_task:
            keys += [("tau", li, tid, "w"), ("tau", li, tid, "b")]
            if state.use_masks:
                keys.append(("v", li, tid))
    keys += [("head", task, "w"), ("head", task, "b")]
    return keys


def _composed_exprs(
    tape: GradTape,
    state: DecomposedState,
    pvars: dict[ParamKey, Var],
    task: int,
    use_local: bool,
) -> list[tuple[Var, Var]]:
    """Tape expressions of the task's composed hidden layers."""
    out = []
    for li, layer in enumerate(state.layers):
        sw = pvars.get(("sigma", li, "w")) or tape.const(layer.shared.weight)
        sb = pvars.get(("sigma", li, "b")) or tape.const(layer.shared.bias)
        if task not in layer.taus:
            out.append((sw, sb))
            continue
        tau = layer.taus[task]
        tw = pvars.get(("tau", li, task, "w")) or tape.const(tau.weight_delta)
        tb = pvars.get(("tau", li, task, "b")) or tape.const(tau.bias_delta)
        local = state.local_for(task) if use_local else None
        if local is not None:
            tw = tw + tape.const(local.weights[li])
            tb = tb + tape.const(local.biases[li])
        if state.use_masks:
            vv = pvars.get(("v", li, task)) or tape.const(layer.mask_logits[task].v)
            mask = vv.sigmoid()
            out.append((sw * mask + tw, sb * mask + tb))
        else:
            out.append((sw + tw, sb + tb))
    return out


def _data_loss(
    tape: GradTape,
    state: DecomposedState,
    pvars: dict[ParamKey, Var],
    layers: list[tuple[Var, Var]],
    x: Array,
    y: Array,
    task: int,
) -> Var:
    act = ACTIVATIONS[state.activation][1]
    h = tape.const(np.atleast_2d(x))
    for w, b in layers:
        h = act(h @ w + b)
    hw = pvars[("head", task, "w")]
    hb = pvars[("head", task, "b")]
    return cross_entropy_mean(h @ hw + hb, y)


def _build_objective(
    state: DecomposedState,
    x: Array,
    y: Array,
    task: int,
    hp: HyperParams,
    objective: str,
    keys: list[ParamKey],
    lambda1: float,
):
    """Returns (tape, loss Var of the smooth part, pvars, l1 penalty value)."""
    tape = GradTape()
    pvars = {key: tape.var(_param_array(state, key)) for key in keys}
    use_local = objective == "eq3"
    plain_net = objective in ("plain", "l2t")
    if plain_net:
        layers = [
            (
                pvars.get(("sigma", li, "w")) or tape.const(layer.shared.weight),
                pvars.get(("sigma", li, "b")) or tape.const(layer.shared.bias),
            )
            for li, layer in enumerate(state.layers)
        ]
    else:
        layers = _composed_exprs(tape, state, pvars, task, use_local)
    loss = _data_loss(tape, state, pvars, layers, x, y, task)

    if objective in ("l2t", "eq1") and hp.lambda2 != 0.0:
        if state.shared_snapshot is None:
            raise ValueError("no shared-weight snapshot; initialize the task first")
        for li, snap in enumerate(state.shared_snapshot):
            sw = pvars.get(("sigma", li, "w")) or tape.const(state.layers[li].shared.weight)
            sb = pvars.get(("sigma", li, "b")) or tape.const(state.layers[li].shared.bias)
            loss = loss + hp.lambda2 * (
                (sw - tape.const(snap.weight)).sqsum() + (sb - tape.const(snap.bias)).sqsum()
            )

    if objective in ("eq2", "eq3") and hp.lambda2 != 0.0:
        idx = state.task_order.index(task)
        for prior in state.task_order[:idx]:
            if prior not in state.restored:
                raise ValueError(f"missing restore target for task {prior}")
            target = state.restored[prior]
            composed = _composed_exprs(tape, state, pvars, prior, use_local)
            for (cw, cb), tgt in zip(composed, target):
                loss = loss + hp.lambda2 * (
                    (cw - tape.const(tgt.weight)).sqsum()
                    + (cb - tape.const(tgt.bias)).sqsum()
                )

    l1 = 0.0
    if lambda1 != 0.0:
        if objective == "eq1":
            l1_tasks = [task]
        elif objective in ("eq2", "eq3"):
            l1_tasks = list(state.task_order)
        else:
            l1_tasks = []
        for li in range(state.num_layers):
            for tid in l1_tasks:
                tau = state.layers[li].taus[tid]
                l1 += float(np.abs(tau.weight_delta).sum() + np.abs(tau.bias_delta).sum())
        l1 *= lambda1
    return tape, loss, pvars, l1


def _standard_keys(state: DecomposedState, task: int, objective: str) -> list[ParamKey]:
    return _collect_keys(state, task, objective, Variant(kind="APD1"))


def _loss_with_grads(batch, state, task, hp, objective):
    x, y = batch
    if task not in state.heads or task not in state.layers[0].taus:
        raise ValueError(f"task {task} is not initialized for training")
    keys = _standard_keys(state, task, objective)
    tape, loss, pvars, l1 = _build_objective(state, x, y, task, hp, objective, keys, hp.lambda1)
    tape.backward(loss)
    grads = {key: var.grad for key, var in pvars.items()}
    return float(loss.value) + l1, grads


def loss_eq1(batch, state: DecomposedState, task: int, hp: HyperParams):
    """Anchored objective; gradients cover the smooth terms only."""
    return _loss_with_grads(batch, state, task, hp, "eq1")


def loss_eq2(batch, state: DecomposedState, task: int, hp: HyperParams):
    """Retroactive objective; gradients cover the smooth terms only."""
    return _loss_with_grads(batch, state, task, hp, "eq2")


def loss_eq3(batch, state: DecomposedState, task: int, hp: HyperParams):
    """Retroactive objective with locally-shared arrays folded in."""
    return _loss_with_grads(batch, state, task, hp, "eq3")


# -----------------------------------------------------------------------
# per-task optimization
# -----------------------------------------------------------------------

def _objective_for(state: DecomposedState, variant: Variant, task: int) -> str:
    first = not state.task_order or state.task_order[0] == task
    if first:
        return "plain"
    return {"L2T": "l2t", "APD-Fixed": "eq1", "APD1": "eq2", "APD2": "eq3"}[variant.kind]


def _sgd_step(state, x, y, task, hp, variant, objective, keys, lr) -> float:
    lambda1 = 0.0 if variant.no_sparsity else hp.lambda1
    tape, loss, pvars, l1 = _build_objective(state, x, y, task, hp, objective, keys, lambda1)
    tape.backward(loss)
    for key, var in pvars.items():
        arr = _param_array(state, key)
        arr -= lr * var.grad
        if key[0] != "tau" and hp.weight_decay != 0.0:
            arr *= 1.0 - lr * hp.weight_decay
    if lambda1 != 0.0:
        threshold = lr * lambda1
        for key in keys:
            if key[0] == "tau":
                arr = _param_array(state, key)
                arr[...] = proximal_l1(arr, threshold)
    return float(loss.value) + l1


def _total_tau_nonzeros(state: DecomposedState) -> int:
    total = 0
    for layer in state.layers:
        for tau in layer.taus.values():
            total += int(np.count_nonzero(tau.weight_delta))
            total += int(np.count_nonzero(tau.bias_delta))
    return total


def _drift_sq(state: DecomposedState, task: int) -> float | None:
    idx = state.task_order.index(task)
    prior = state.task_order[:idx]
    if not prior or not state.restored:
        return None
    total = 0.0
    for tid in prior:
        target = state.restored[tid]
        for (cw, cb), tgt in zip(composed_network(state, tid), target):
            total += float(((cw - tgt.weight) ** 2).sum() + ((cb - tgt.bias) ** 2).sum())
    return total


def train_task(
    state: DecomposedState, dataset: TaskDataset, hp: HyperParams, variant: Variant
):
    """Minibatch SGD on the variant's objective; returns (state, epoch logs)."""
    hp.validate()
    task = dataset.task_id
    if dataset.train_idx.size == 0:
        raise ValueError(f"task {task} has an empty training split")
    if task not in state.heads:
        raise ValueError(f"task {task} is not initialized")
    objective = _objective_for(state, variant, task)
    keys = _collect_keys(state, task, objective, variant)
    X, Y = dataset.features, dataset.labels
    logs = []
    for epoch in range(hp.epochs):
        lr = hp.lr0 * hp.lr_decay**epoch
        perm = rng_for(hp.seed, "shuffle", task, epoch).permutation(dataset.train_idx)
        batch_losses = []
        for start in range(0, perm.size, hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            batch_losses.append(
                _sgd_step(state, X[idx], Y[idx], task, hp, variant, objective, keys, lr)
            )
        entry = {
            "task": task,
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(batch_losses)),
            "tau_nonzeros": _total_tau_nonzeros(state),
        }
        if objective in ("eq2", "eq3"):
            entry["drift_sq"] = _drift_sq(state, task)
        if dataset.val_idx.size:
            entry["val_accuracy"] = metrics.evaluate(state, task, *dataset.split_arrays("val"))
        logs.append(entry)
    return state, logs


# -----------------------------------------------------------------------
# sequence driver
# -----------------------------------------------------------------------

@dataclass
class SequenceResult:
    state: DecomposedState
    performance: metrics.PerformanceMatrix
    trajectory: list[dict]
    epoch_logs: list[dict] = field(default_factory=list)


def _init_plain_task(state, task, n_classes, rng):
    """Head-only initialization used for the first task and the L2T baseline."""
    if task in state.heads:
        raise ValueError(f"task {task} already initialized")
    d_hidden = state.layers[-1].shared.weight.shape[1]
    state.heads[task] = new_head(rng, d_hidden, n_classes)
    state.shared_snapshot = [layer.shared.copy() for layer in state.layers]
    state.task_order.append(task)


def _adopt_first_task(state: DecomposedState, task: int) -> None:
    """Give the plainly-trained first task its decomposition slots.

    The delta starts empty and the mask saturates toward one, so the
    composed weights coincide with the shared weights the task trained.
    """
    for layer in state.layers:
        d_out = layer.shared.weight.shape[1]
        logit = FIRST_TASK_MASK_LOGIT if state.use_masks else 0.0
        layer.mask_logits[task] = LayerMaskLogits(np.full(d_out, logit), task)
        layer.taus[task] = LayerTaskAdaptive(
            np.zeros_like(layer.shared.weight), np.zeros(d_out), task
        )


def _trajectory_entry(state: DecomposedState, position: int) -> dict:
    series = {
        "shared": flatten_pairs([(l.shared.weight, l.shared.bias) for l in state.layers])
    }
    for tid in state.task_order:
        series[f"task{tid}"] = flatten_pairs(composed_network(state, tid))
    return {"position": position, "series": series}


def run_sequence(
    tasks: list[TaskDataset],
    order,
    hp: HyperParams,
    variant: Variant,
    widths: tuple[int, ...] = (32, 32),
    *,
    activation: str = "relu",
    state: DecomposedState | None = None,
) -> SequenceResult:
    """Train the whole stream in the given arrival order.

    Pass a previously checkpointed `state` to resume mid-sequence; the
    remaining tasks reproduce the uninterrupted run bit-exactly.
    """
    hp.validate()
    order = [int(i) for i in order]
    T = len(tasks)
    if sorted(order) != list(range(T)):
        raise ValueError(f"order must be a permutation of 0..{T - 1}, got {order}")
    input_dim = tasks[0].features.shape[1]
    if any(t.features.shape[1] != input_dim for t in tasks):
        raise ValueError("all tasks must share one feature dimension")
    for t in tasks:
        if t.test_idx.size == 0:
            raise ValueError(f"task {t.task_id} has no test split")

    if state is None:
        state = build_state(
            input_dim,
            tuple(widths),
            seed=hp.seed,
            use_masks=variant.decomposed and not variant.no_adaptive_mask,
            activation=activation,
        )
    else:
        if state.seed != hp.seed:
            raise ValueError(f"checkpoint seed {state.seed} != hyperparameter seed {hp.seed}")
        done = [order[p] for p in range(len(state.task_order))]
        if state.task_order != done:
            raise ValueError(
                f"checkpoint history {state.task_order} does not match order prefix {done}"
            )

    start = len(state.task_order)
    acc = np.full((T, T), np.nan)
    trajectory: list[dict] = []
    epoch_logs: list[dict] = []

    for pos in range(start, T):
        tid = order[pos]
        ds = tasks[tid]
        head_rng = rng_for(hp.seed, "head", tid)
        if pos == 0:
            _init_plain_task(state, tid, ds.num_classes, head_rng)
            _, logs = train_task(state, ds, hp, variant)
            if variant.decomposed:
                _adopt_first_task(state, tid)
        else:
            if variant.retroactive:
                refresh_restore_targets(state)
            if variant.decomposed:
                init_task(state, tid, ds.num_classes, head_rng, mode=hp.tau_init)
            else:
                _init_plain_task(state, tid, ds.num_classes, head_rng)
            _, logs = train_task(state, ds, hp, variant)
        for entry in logs:
            entry["position"] = pos
        epoch_logs.extend(logs)
        if variant.consolidates and (pos + 1) % hp.s == 0:
            consolidate(state, hp, rng_for(hp.seed, "kmeans", pos))
        for seen in state.task_order:
            acc[pos, seen] = metrics.evaluate(
                state, seen, *tasks[seen].split_arrays("test")
            )
        trajectory.append(_trajectory_entry(state, pos))

    return SequenceResult(
        state=state,
        performance=metrics.PerformanceMatrix(order=tuple(order), acc=acc),
        trajectory=trajectory,
        epoch_logs=epoch_logs,
    )
