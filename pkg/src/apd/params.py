"""Decomposed parameter store and its composition/restoration algebra.

A network's hidden layers are stored as task-shared weights plus, per task,
a mask-logit vector over output units and a sparse additive delta.  The
effective weights for a task are

    theta = shared * sigmoid(v)  (columnwise over output units)  + delta

with the delta optionally augmented by a locally-shared array owned by the
task's consolidation group.  Output heads are fully task-private and take no
part in the decomposition.  Biases are decomposed and masked exactly like
weight columns.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numeric import ACTIVATIONS, sigmoid
from .rng import rng_for

Array = np.ndarray


@dataclass
class LayerShared:
    """Task-shared weights of one hidden layer."""

    weight: Array  # (d_in, d_out)
    bias: Array    # (d_out,)

    def copy(self) -> "LayerShared":
        return LayerShared(self.weight.copy(), self.bias.copy())


@dataclass
class LayerTaskAdaptive:
    """Per-task additive delta; exact zeros are meaningful and preserved."""

    weight_delta: Array
    bias_delta: Array
    owner_task: int


@dataclass
class LayerMaskLogits:
    """Per-task mask logits over the layer's output units."""

    v: Array  # (d_out,)
    owner_task: int


@dataclass
class LocalShared:
    """Locally-shared arrays for one consolidation group, all hidden layers."""

    group_id: int
    weights: list[Array]
    biases: list[Array]


class DenseLayer(NamedTuple):
    weight: Array
    bias: Array


@dataclass
class Head:
    """Task-private output layer."""

    weight: Array  # (d_hidden, n_classes)
    bias: Array    # (n_classes,)


@dataclass
class DecomposedLayer:
    shared: LayerShared
    taus: dict[int, LayerTaskAdaptive] = field(default_factory=dict)
    mask_logits: dict[int, LayerMaskLogits] = field(default_factory=dict)


@dataclass
class DecomposedState:
    """All parameters of one continually-trained network.

    ``shared_snapshot`` holds the shared weights as of the latest task
    arrival; ``restored`` holds the frozen per-task dense targets computed
    from that snapshot.  Both are refreshed at each new task boundary.
    """

    layers: list[DecomposedLayer]
    heads: dict[int, Head] = field(default_factory=dict)
    groups: dict[int, LocalShared] = field(default_factory=dict)
    assignment: dict[int, int] = field(default_factory=dict)
    shared_snapshot: list[LayerShared] | None = None
    restored: dict[int, list[DenseLayer]] = field(default_factory=dict)
    task_order: list[int] = field(default_factory=list)
    use_masks: bool = True
    activation: str = "relu"
    next_centroid_count: int = 0
    seed: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        return [tuple(layer.shared.weight.shape) for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shared.weight.shape[0]

    def local_for(self, task: int) -> LocalShared | None:
        """The task's locally-shared arrays, or None if the task is ungrouped."""
        gid = self.assignment.get(task)
        if gid is None:
            return None
        if gid not in self.groups:
            raise KeyError(f"task {task} assigned to missing group {gid}")
        return self.groups[gid]


def build_state(
    input_dim: int,
    widths: tuple[int, ...],
    *,
    seed: int = 0,
    use_masks: bool = True,
    activation: str = "relu",
) -> DecomposedState:
    """Fresh state with He-initialized shared weights and zero biases."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if not widths or any(w < 1 for w in widths):
        raise ValueError(f"layer widths must all be >= 1, got {widths}")
    rng = rng_for(seed, "shared-init")
    layers = []
    fan_in = input_dim
    for w in widths:
        weight = rng.standard_normal((fan_in, w)) * np.sqrt(2.0 / fan_in)
        layers.append(DecomposedLayer(LayerShared(weight, np.zeros(w))))
        fan_in = w
    return DecomposedState(
        layers=layers,
        use_masks=use_masks,
        activation=activation,
        seed=seed,
    )


def new_head(rng: np.random.Generator, d_hidden: int, n_classes: int) -> Head:
    weight = rng.standard_normal((d_hidden, n_classes)) * np.sqrt(1.0 / d_hidden)
    return Head(weight, np.zeros(n_classes))


def mask_of(logits: LayerMaskLogits) -> Array:
    """Elementwise sigmoid of the mask logits, strictly inside (0, 1)."""
    return np.atleast_1d(sigmoid(logits.v))


def compose(shared: LayerShared, mask: Array, tau: LayerTaskAdaptive) -> DenseLayer:
    """Dense layer shared * mask + delta, mask broadcast over output units."""
    mask = np.asarray(mask, dtype=np.float64)
    d_out = shared.weight.shape[1]
    if mask.shape != (d_out,):
        raise ValueError(f"mask shape {mask.shape} does not match {d_out} output units")
    if tau.weight_delta.shape != shared.weight.shape:
        raise ValueError(
            f"delta shape {tau.weight_delta.shape} does not match shared {shared.weight.shape}"
        )
    weight = shared.weight * mask + tau.weight_delta
    bias = shared.bias * mask + tau.bias_delta
    return DenseLayer(weight, bias)


def effective_tau(
    tau: LayerTaskAdaptive, local: LocalShared | None, layer_index: int
) -> tuple[Array, Array]:
    """The task delta plus its group's locally-shared arrays, if any."""
    if local is None:
        return tau.weight_delta, tau.bias_delta
    lw = local.weights[layer_index]
    lb = local.biases[layer_index]
    if lw.shape != tau.weight_delta.shape:
        raise ValueError(
            f"locally-shared shape {lw.shape} does not match delta {tau.weight_delta.shape}"
        )
    return tau.weight_delta + lw, tau.bias_delta + lb


def composed_layer(state: DecomposedState, layer_index: int, task: int) -> DenseLayer:
    """Effective dense layer of `task`; tasks without mask/delta use shared as-is."""
    layer = state.layers[layer_index]
    d_out = layer.shared.weight.shape[1]
    if state.use_masks and task in layer.mask_logits:
        mask = mask_of(layer.mask_logits[task])
    else:
        mask = np.ones(d_out)
    if task in layer.taus:
        tw, tb = effective_tau(layer.taus[task], state.local_for(task), layer_index)
        tau = LayerTaskAdaptive(tw, tb, task)
    else:
        tau = LayerTaskAdaptive(np.zeros_like(layer.shared.weight), np.zeros(d_out), task)
    return compose(layer.shared, mask, tau)


def composed_network(state: DecomposedState, task: int) -> list[DenseLayer]:
    return [composed_layer(state, li, task) for li in range(state.num_layers)]


def forward(state: DecomposedState, x: Array, task: int) -> Array:
    """Logits of `task` for a single feature vector or a (batch, dim) matrix."""
    if task not in state.heads:
        raise KeyError(f"unknown task {task}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != state.input_dim:
        raise ValueError(f"input dim {h.shape[1]} does not match network {state.input_dim}")
    act = ACTIVATIONS[state.activation][0]
    for li in range(state.num_layers):
        w, b = composed_layer(state, li, task)
        h = act(h @ w + b)
    head = state.heads[task]
    logits = h @ head.weight + head.bias
    return logits[0] if single else logits


def init_task(
    state: DecomposedState,
    task: int,
    n_classes: int,
    rng: np.random.Generator,
    mode: str = "copy-shared",
) -> DecomposedState:
    """Add delta/mask/head slots for a new task and snapshot the shared weights.

    mode "copy-shared" seeds the delta with a copy of the current shared
    weights; "zeros" starts it empty.  Mask logits start at zero (mask 0.5).
    """
    if task in state.heads:
        raise ValueError(f"task {task} already initialized")
    if mode not in ("copy-shared", "zeros"):
        raise ValueError(f"unknown delta init mode {mode!r}")
    for layer in state.layers:
        if mode == "copy-shared":
            tw, tb = layer.shared.weight.copy(), layer.shared.bias.copy()
        else:
            tw = np.zeros_like(layer.shared.weight)
            tb = np.zeros_like(layer.shared.bias)
        layer.taus[task] = LayerTaskAdaptive(tw, tb, task)
        layer.mask_logits[task] = LayerMaskLogits(np.zeros(layer.shared.weight.shape[1]), task)
    d_hidden = state.layers[-1].shared.weight.shape[1]
    state.heads[task] = new_head(rng, d_hidden, n_classes)
    state.shared_snapshot = [layer.shared.copy() for layer in state.layers]
    state.task_order.append(task)
    return state


def refresh_restore_targets(state: DecomposedState) -> None:
    """Recompute the frozen per-task dense targets from the live parameters.

    Called at each task arrival, when the live shared weights equal the new
    snapshot; the targets then stay fixed for the duration of the task.
    """
    state.restored = {}
    for task in state.task_order:
        if task not in state.layers[0].taus:
            continue
        state.restored[task] = composed_network(state, task)


def restore(state: DecomposedState, task: int) -> list[DenseLayer]:
    """The frozen dense target of a previously-trained task."""
    if task not in state.restored:
        raise KeyError(f"no restore target for task {task}")
    return state.restored[task]


def snapshot_state(state: DecomposedState) -> DecomposedState:
    """Deep, independent copy safe to mutate or evaluate concurrently."""
    return copy.deepcopy(state)


def flatten_pairs(pairs: list) -> Array:
    """Concatenate (weight, bias) pairs into one flat vector, layer by layer."""
    chunks = []
    for w, b in pairs:
        chunks.append(np.asarray(w).ravel())
        chunks.append(np.asarray(b).ravel())
    return np.concatenate(chunks)


def unflatten_pairs(dims: list[tuple[int, int]], vec: Array) -> list[tuple[Array, Array]]:
    """Inverse of flatten_pairs for the given per-layer (d_in, d_out) dims."""
    out = []
    pos = 0
    for d_in, d_out in dims:
        w = vec[pos : pos + d_in * d_out].reshape(d_in, d_out).copy()
        pos += d_in * d_out
        b = vec[pos : pos + d_out].copy()
        pos += d_out
        out.append((w, b))
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match dims {dims}")
    return out
