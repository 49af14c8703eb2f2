"""Hierarchical knowledge consolidation.

Task deltas are clustered with Lloyd's algorithm on their flattened values;
within each cluster, coordinates whose spread (max - min across members)
stays within the threshold beta are moved into a single locally-shared array
and zeroed in every member, which is where the capacity savings come from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import DecomposedState, LocalShared, effective_tau, flatten_pairs, unflatten_pairs
from .rng import rng_for

Array = np.ndarray


@dataclass
class ClusterModel:
    K: int
    centroids: list[Array]
    assignment: dict[int, int]


def kmeans(
    points: dict[int, Array],
    K: int,
    init_centroids: tuple[Array, ...] = (),
    max_iter: int = 100,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> ClusterModel:
    """Lloyd iterations with Euclidean distance on the given point vectors.

    Centroids start from `init_centroids`, padded with copies of uniformly
    sampled data points.  Empty clusters are reseeded to the point farthest
    from its current centroid.  Ties in assignment go to the lowest cluster
    index.  `trace`, when given, collects the objective after each
    assignment step.
    """
    ids = sorted(points)
    n = len(ids)
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if not 1 <= K <= n:
        raise ValueError(f"K={K} out of range for {n} points")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if rng is None:
        rng = rng_for(0, "kmeans-default")
    X = np.stack([np.asarray(points[i], dtype=np.float64) for i in ids])
    cents = [np.array(c, dtype=np.float64) for c in init_centroids[:K]]
    while len(cents) < K:
        cents.append(X[int(rng.integers(n))].copy())
    C = np.stack(cents)

    assign = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for g in range(K):
            if np.any(new_assign == g):
                continue
            dist_to_own = ((X - C[new_assign]) ** 2).sum(axis=1)
            far = int(dist_to_own.argmax())
            if dist_to_own[far] == 0.0:
                continue  # every point already sits on a centroid
            C[g] = X[far]
            new_assign[far] = g
        if trace is not None:
            trace.append(float(((X - C[new_assign]) ** 2).sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for g in range(K):
            members = X[assign == g]
            if members.size:
                C[g] = members.mean(axis=0)

    # final centroids are exact member means
    centroids = []
    for g in range(K):
        members = X[assign == g]
        centroids.append(members.mean(axis=0) if members.size else C[g].copy())
    assignment = {ids[i]: int(assign[i]) for i in range(n)}
    return ClusterModel(K=K, centroids=centroids, assignment=assignment)


def decompose_group(
    taus: dict[int, Array], mu: Array, beta: float
) -> tuple[Array, dict[int, Array]]:
    """Split member vectors into a locally-shared part and sparser residuals.

    Per coordinate j: if max - min over members is <= beta, every member
    becomes exactly zero there and the shared part takes the cluster mean;
    otherwise the shared part is zero and members keep their values.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    ids = sorted(taus)
    if not ids:
        raise ValueError("decompose_group needs at least one member")
    M = np.stack([np.asarray(taus[i], dtype=np.float64) for i in ids])
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != M.shape[1:]:
        raise ValueError(f"centroid shape {mu.shape} does not match members {M.shape[1:]}")
    spread = M.max(axis=0) - M.min(axis=0)
    consolidated = spread <= beta
    shared = np.where(consolidated, mu, 0.0)
    residuals = {
        tid: np.where(consolidated, 0.0, M[row]) for row, tid in enumerate(ids)
    }
    return shared, residuals


def materialized_taus(state: DecomposedState) -> dict[int, Array]:
    """Flattened effective deltas (delta + locally-shared) of every task."""
    out = {}
    for task in sorted(state.layers[0].taus):
        local = state.local_for(task)
        pairs = [
            effective_tau(state.layers[li].taus[task], local, li)
            for li in range(state.num_layers)
        ]
        out[task] = flatten_pairs(pairs)
    return out


def consolidate(state: DecomposedState, hp, rng: np.random.Generator) -> DecomposedState:
    """One consolidation event: recluster all tasks and re-extract locals.

    Previous locally-shared arrays seed the new centroids, then get deleted;
    the centroid budget grows by hp.k for the next event.
    """
    points = materialized_taus(state)
    if not points:
        return state
    k_sched = state.next_centroid_count if state.next_centroid_count > 0 else hp.K0
    K = min(k_sched, len(points))
    prev = tuple(
        flatten_pairs(list(zip(state.groups[g].weights, state.groups[g].biases)))
        for g in sorted(state.groups)
    )
    model = kmeans(points, K, init_centroids=prev, rng=rng)

    dims = state.layer_dims
    state.groups = {}
    state.assignment = dict(model.assignment)
    for g in range(model.K):
        members = {tid: points[tid] for tid, gg in model.assignment.items() if gg == g}
        if not members:
            continue
        shared_vec, residuals = decompose_group(members, model.centroids[g], hp.beta)
        pairs = unflatten_pairs(dims, shared_vec)
        state.groups[g] = LocalShared(
            group_id=g,
            weights=[w for w, _ in pairs],
            biases=[b for _, b in pairs],
        )
        for tid, vec in residuals.items():
            for li, (w, b) in enumerate(unflatten_pairs(dims, vec)):
                state.layers[li].taus[tid].weight_delta = w
                state.layers[li].taus[tid].bias_delta = b
    state.next_centroid_count = k_sched + hp.k
    return state
