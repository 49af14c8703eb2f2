"""Binary checkpoint format with bit-exact round trips.

Layout: magic "APDC", little-endian u32 version, then a sequence of
length-prefixed sections (u32 name length, name, u64 payload length,
payload).  Shared weights, mask logits, heads and restore targets are stored
dense; per-task deltas and locally-shared arrays are stored sparse as
strictly-increasing (coordinate, value) pairs.  Random state reduces to the
experiment seed because every stream is re-derivable from it.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .params import (
    DecomposedLayer,
    DecomposedState,
    DenseLayer,
    Head,
    LayerMaskLogits,
    LayerShared,
    LayerTaskAdaptive,
    LocalShared,
)

MAGIC = b"APDC"
VERSION = 1

_F8 = np.dtype("<f8")
_U8 = np.dtype("<u8")


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be written or parsed."""


def _dense_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_F8).tobytes()


def _sparse_bytes(arr: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(arr, dtype=_F8).ravel()
    idx = np.flatnonzero(flat).astype(_U8)
    vals = flat[idx.astype(np.int64)]
    return struct.pack("<Q", idx.size) + idx.tobytes() + vals.astype(_F8).tobytes()


class _Reader:
    def __init__(self, payload: bytes, section: str):
        self._buf = payload
        self._pos = 0
        self._section = section

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise CheckpointError(f"section {self._section!r}: truncated payload")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def dense(self, shape: tuple) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(n * 8), dtype=_F8).astype(np.float64)
        return arr.reshape(shape)

    def sparse(self, shape: tuple) -> np.ndarray:
        count = self.u64()
        size = int(np.prod(shape))
        if count > size:
            raise CheckpointError(
                f"section {self._section!r}: {count} sparse entries exceed size {size}"
            )
        idx = np.frombuffer(self.take(count * 8), dtype=_U8).astype(np.int64)
        vals = np.frombuffer(self.take(count * 8), dtype=_F8).astype(np.float64)
        if count:
            if idx.max() >= size:
                raise CheckpointError(f"section {self._section!r}: sparse index out of range")
            if np.any(np.diff(idx) <= 0):
                raise CheckpointError(
                    f"section {self._section!r}: sparse indices not strictly increasing"
                )
        flat = np.zeros(size)
        flat[idx] = vals
        return flat.reshape(shape)

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise CheckpointError(
                f"section {self._section!r}: {len(self._buf) - self._pos} trailing bytes"
            )


def _write_section(out: io.BytesIO, name: str, payload: bytes) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def dumps(state: DecomposedState) -> bytes:
    """Serialize a state to checkpoint bytes (deterministic for equal states)."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))

    meta = {
        "activation": state.activation,
        "assignment": {str(t): int(g) for t, g in sorted(state.assignment.items())},
        "layer_dims": [list(d) for d in state.layer_dims],
        "next_centroid_count": int(state.next_centroid_count),
        "seed": int(state.seed),
        "task_order": [int(t) for t in state.task_order],
        "use_masks": bool(state.use_masks),
    }
    _write_section(out, "meta", json.dumps(meta, sort_keys=True).encode("utf-8"))

    sigma = b"".join(
        _dense_bytes(l.shared.weight) + _dense_bytes(l.shared.bias) for l in state.layers
    )
    _write_section(out, "sigma", sigma)

    if state.shared_snapshot is None:
        _write_section(out, "snapshot", b"\x00")
    else:
        snap = b"\x01" + b"".join(
            _dense_bytes(s.weight) + _dense_bytes(s.bias) for s in state.shared_snapshot
        )
        _write_section(out, "snapshot", snap)

    for tid in sorted(state.layers[0].taus):
        payload = b"".join(
            _sparse_bytes(layer.taus[tid].weight_delta)
            + _sparse_bytes(layer.taus[tid].bias_delta)
            for layer in state.layers
        )
        _write_section(out, f"tau:{tid}", payload)

    for tid in sorted(state.layers[0].mask_logits):
        payload = b"".join(
            _dense_bytes(layer.mask_logits[tid].v) for layer in state.layers
        )
        _write_section(out, f"mask:{tid}", payload)

    for tid in sorted(state.heads):
        head = state.heads[tid]
        payload = (
            struct.pack("<QQ", *head.weight.shape)
            + _dense_bytes(head.weight)
            + _dense_bytes(head.bias)
        )
        _write_section(out, f"head:{tid}", payload)

    for gid in sorted(state.groups):
        grp = state.groups[gid]
        payload = b"".join(
            _sparse_bytes(w) + _sparse_bytes(b) for w, b in zip(grp.weights, grp.biases)
        )
        _write_section(out, f"local:{gid}", payload)

    for tid in sorted(state.restored):
        payload = b"".join(
            _dense_bytes(d.weight) + _dense_bytes(d.bias) for d in state.restored[tid]
        )
        _write_section(out, f"restored:{tid}", payload)

    return out.getvalue()


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def loads(data: bytes) -> DecomposedState:
    """Parse checkpoint bytes; raises CheckpointError naming the bad section."""
    fh = io.BytesIO(data)
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    sections: list[tuple[str, bytes]] = []
    while True:
        head = fh.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint while reading section header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(fh, name_len, "section name").decode("utf-8")
        (payload_len,) = struct.unpack("<Q", _read_exact(fh, 8, f"section {name!r} length"))
        sections.append((name, _read_exact(fh, payload_len, f"section {name!r} payload")))

    table = dict(sections)
    if len(table) != len(sections):
        raise CheckpointError("duplicate sections in checkpoint")
    if "meta" not in table:
        raise CheckpointError("section 'meta': missing")
    if "sigma" not in table:
        raise CheckpointError("section 'sigma': missing")
    try:
        meta = json.loads(table["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"section 'meta': invalid JSON ({exc})") from None

    dims = [tuple(d) for d in meta["layer_dims"]]
    layers = []
    reader = _Reader(table["sigma"], "sigma")
    for d_in, d_out in dims:
        weight = reader.dense((d_in, d_out))
        bias = reader.dense((d_out,))
        layers.append(DecomposedLayer(LayerShared(weight, bias)))
    reader.done()

    state = DecomposedState(
        layers=layers,
        use_masks=bool(meta["use_masks"]),
        activation=meta["activation"],
        next_centroid_count=int(meta["next_centroid_count"]),
        seed=int(meta["seed"]),
        task_order=[int(t) for t in meta["task_order"]],
        assignment={int(t): int(g) for t, g in meta["assignment"].items()},
    )

    reader = _Reader(table.get("snapshot", b"\x00"), "snapshot")
    flag = reader.take(1)
    if flag == b"\x01":
        snap = []
        for d_in, d_out in dims:
            w = reader.dense((d_in, d_out))
            b = reader.dense((d_out,))
            snap.append(LayerShared(w, b))
        state.shared_snapshot = snap
    elif flag != b"\x00":
        raise CheckpointError("section 'snapshot': bad presence flag")
    reader.done()

    for name, payload in sections:
        if ":" not in name:
            continue
        kind, _, ident = name.partition(":")
        reader = _Reader(payload, name)
        if kind == "tau":
            tid = int(ident)
            for li, (d_in, d_out) in enumerate(dims):
                w = reader.sparse((d_in, d_out))
                b = reader.sparse((d_out,))
                state.layers[li].taus[tid] = LayerTaskAdaptive(w, b, tid)
        elif kind == "mask":
            tid = int(ident)
            for li, (_, d_out) in enumerate(dims):
                state.layers[li].mask_logits[tid] = LayerMaskLogits(
                    reader.dense((d_out,)), tid
                )
        elif kind == "head":
            tid = int(ident)
            h, c = struct.unpack("<QQ", reader.take(16))
            weight = reader.dense((h, c))
            bias = reader.dense((c,))
            state.heads[tid] = Head(weight, bias)
        elif kind == "local":
            gid = int(ident)
            weights, biases = [], []
            for d_in, d_out in dims:
                weights.append(reader.sparse((d_in, d_out)))
                biases.append(reader.sparse((d_out,)))
            state.groups[gid] = LocalShared(gid, weights, biases)
        elif kind == "restored":
            tid = int(ident)
            target = []
            for d_in, d_out in dims:
                w = reader.dense((d_in, d_out))
                b = reader.dense((d_out,))
                target.append(DenseLayer(w, b))
            state.restored[tid] = target
        else:
            raise CheckpointError(f"section {name!r}: unknown section kind")
        reader.done()

    for gid in state.assignment.values():
        if gid not in state.groups:
            raise CheckpointError(f"section 'meta': assignment references missing group {gid}")
    return state


def save(state: DecomposedState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path) -> DecomposedState:
    with open(path, "rb") as fh:
        return loads(fh.read())
