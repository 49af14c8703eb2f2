"""Float64 dense linear algebra and a one-shot reverse-mode gradient tape.

Everything operates on plain numpy arrays.  The tape is deliberately small:
it supports exactly the operations the masked-composition objectives need
(broadcasted arithmetic, 2-D matmul, pointwise nonlinearities, sum-of-squares
reductions and a fused softmax cross-entropy).  All reductions use numpy's
fixed internal summation order, so identical inputs produce bit-identical
outputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Array = np.ndarray


def matmul(a: Array, b: Array) -> Array:
    """Product of two 2-D matrices; raises on any shape mismatch."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    """Numerically stable logistic function; no overflow for any finite x."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if np.ndim(x) == 0:
        return float(out[0])
    return out


def softmax_cross_entropy(logits: Array, label: int) -> tuple[float, Array]:
    """Loss -log softmax(logits)[label] and its gradient (softmax - onehot)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a logit vector, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    m = z.max()
    ez = np.exp(z - m)
    se = ez.sum()
    loss = float(np.log(se) - (z[label] - m))
    grad = ez / se
    grad[label] -= 1.0
    return loss, grad


# -----------------------------------------------------------------------
# reverse-mode tape
# -----------------------------------------------------------------------

def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcasted gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """One node in a tape graph: a float64 value plus its adjoint buffer."""

    __slots__ = ("value", "grad", "tape", "_backward")

    def __init__(self, tape: "GradTape", value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.tape = tape
        self._backward: Callable[[Array], None] | None = None

    # -- helpers -----------------------------------------------------

    def _wrap(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("cannot mix variables from different tapes")
            return other
        return Var(self.tape, other)

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        o = self._wrap(other)
        a, b = self, o

        def backward(g):
            a.grad += _unbroadcast(g, a.value.shape)
            b.grad += _unbroadcast(g, b.value.shape)

        return self.tape._track(a.value + b.value, backward)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._wrap(other)
        a, b = self, o

        def backward(g):
            a.grad += _unbroadcast(g, a.value.shape)
            b.grad -= _unbroadcast(g, b.value.shape)

        return self.tape._track(a.value - b.value, backward)

    def __rsub__(self, other):
        return self._wrap(other).__sub__(self)

    def __mul__(self, other):
        o = self._wrap(other)
        a, b = self, o

        def backward(g):
            a.grad += _unbroadcast(g * b.value, a.value.shape)
            b.grad += _unbroadcast(g * a.value, b.value.shape)

        return self.tape._track(a.value * b.value, backward)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(g):
            a.grad -= g

        return self.tape._track(-a.value, backward)

    def __matmul__(self, other):
        o = self._wrap(other)
        a, b = self, o
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}"
            )
        if a.value.shape[1] != b.value.shape[0]:
            raise ValueError(
                f"matmul inner dimensions disagree: {a.value.shape} x {b.value.shape}"
            )

        def backward(g):
            a.grad += g @ b.value.T
            b.grad += a.value.T @ g

        return self.tape._track(a.value @ b.value, backward)

    # -- nonlinearities and reductions ---------------------------------

    def relu(self):
        a = self
        keep = a.value > 0.0

        def backward(g):
            a.grad += g * keep

        return self.tape._track(np.where(keep, a.value, 0.0), backward)

    def tanh(self):
        a = self
        t = np.tanh(a.value)

        def backward(g):
            a.grad += g * (1.0 - t * t)

        return self.tape._track(t, backward)

    def sigmoid(self):
        a = self
        s = np.atleast_1d(sigmoid(a.value)).reshape(a.value.shape)

        def backward(g):
            a.grad += g * s * (1.0 - s)

        return self.tape._track(s, backward)

    def sum(self):
        a = self

        def backward(g):
            a.grad += g

        return self.tape._track(a.value.sum(), backward)

    def sqsum(self):
        """Sum of squared entries (the squared Frobenius/L2 norm)."""
        a = self

        def backward(g):
            a.grad += g * 2.0 * a.value

        return self.tape._track((a.value * a.value).sum(), backward)


class GradTape:
    """Records one forward evaluation; supports a single backward pass.

    Adjoints of parameters that do not influence the loss stay exactly zero.
    """

    def __init__(self):
        self._nodes: list[Var] = []
        self._spent = False

    def var(self, value) -> Var:
        """Register a leaf (parameter) whose gradient will be accumulated."""
        v = Var(self, value)
        self._nodes.append(v)
        return v

    def const(self, value) -> Var:
        """Wrap a value that participates in the graph but is not tracked."""
        return Var(self, value)

    def _track(self, value, backward) -> Var:
        v = Var(self, value)
        v._backward = backward
        self._nodes.append(v)
        return v

    def backward(self, loss: Var) -> None:
        if self._spent:
            raise RuntimeError("GradTape supports exactly one backward pass")
        if loss.value.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node._backward is not None:
                node._backward(node.grad)


def cross_entropy_mean(logits: Var, labels: Array) -> Var:
    """Mean softmax cross-entropy of a (batch, classes) logit Var."""
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"expected (batch, classes) logits, got shape {z.shape}")
    n, c = z.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels out of range for {c} classes")
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    se = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float((np.log(se[:, 0]) - (z[rows, labels] - m[:, 0])).mean())
    p = ez / se

    def backward(g):
        gl = p.copy()
        gl[rows, labels] -= 1.0
        logits.grad += g * gl / n

    return logits.tape._track(np.float64(loss), backward)


# activation registry: name -> (plain array function, tape Var function)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda v: v.relu()),
    "tanh": (np.tanh, lambda v: v.tanh()),
    "identity": (lambda x: x, lambda v: v),
}


def grad_check(loss_fn, params: list[Array], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)`` must be a pure function of the
    parameter arrays (which are perturbed in place and restored).  The
    relative error per coordinate is |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _, grads = loss_fn(params)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        gflat = np.asarray(grads[pi]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp, _ = loss_fn(params)
            flat[j] = orig - eps
            lm, _ = loss_fn(params)
            flat[j] = orig
            g_fd = (lp - lm) / (2.0 * eps)
            rel = abs(g_fd - gflat[j]) / max(1e-8, abs(g_fd) + abs(gflat[j]))
            worst = max(worst, rel)
    return worst
