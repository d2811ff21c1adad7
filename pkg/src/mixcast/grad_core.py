"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every operation as it runs (define-by-run); ``Tape.backward``
replays the records in reverse creation order and accumulates vector-Jacobian
products. The op set is exactly what the mixture model needs: dense matmul,
elementwise arithmetic and activations, reductions, concat/slice, and a
numerically safe log-sum-exp.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "square",
    "sum_",
    "mean",
    "concat",
    "slice_",
    "log_sum_exp",
    "check_gradients",
]


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node on a tape: immutable float64 array plus backward bookkeeping."""

    __slots__ = ("tape", "nid", "data", "op", "parents", "_vjp")

    def __init__(self, tape: "Tape", data: np.ndarray, op: str, parents=(), vjp=None):
        self.tape = tape
        self.data = data
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.nid = tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(nid={self.nid}, op={self.op!r}, shape={self.data.shape})"

    # operator sugar; non-Tensor operands are lifted to constants on the tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; node ids are topological by construction.

    Single-threaded: one tape must not be shared across threads, but distinct
    tapes are fully independent.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, tensor: Tensor) -> int:
        self.nodes.append(tensor)
        return len(self.nodes) - 1

    def leaf(self, data, op: str = "leaf") -> Tensor:
        """Create an input node (no parents)."""
        return Tensor(self, _as_array(data), op)

    def const(self, data) -> Tensor:
        return self.leaf(data, op="const")

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar root w.r.t. every node that feeds it.

        Returns a map node id -> gradient array (same shape as the node).
        The root's own entry is 1. Nodes not on a path to the root are absent.
        """
        if root.tape is not self:
            raise ValueError("root tensor belongs to a different tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: dict[int, np.ndarray] = {root.nid: np.ones_like(root.data)}
        for node in reversed(self.nodes[: root.nid + 1]):
            g = grads.get(node.nid)
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(parent.nid)
                grads[parent.nid] = pg if acc is None else acc + pg
        return grads


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("cannot mix tensors from different tapes")
        return x
    return tape.const(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(a.tape, b)
    if isinstance(b, Tensor):
        return _lift(b.tape, a), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return Tensor(
        a.tape, out, "add", (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return Tensor(
        a.tape, out, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return Tensor(
        a.tape, out, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return Tensor(
        a.tape, out, "div", (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        A, B = a.data, b.data
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B), A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return g @ B.T, np.outer(A, g)
        return g * B, g * A

    return Tensor(a.tape, out, "matmul", (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(a.tape, out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor(a.tape, out, "log", (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(a.tape, out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # expit is the overflow-safe logistic ufunc
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor(a.tape, out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return Tensor(a.tape, out, "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.tape, a.data * a.data, "square", (a,), lambda g: (g * 2.0 * a.data,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(a.tape, out, "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy() / count,)

    return Tensor(a.tape, out, "mean", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    tape = tensors[0].tape
    parts = [np.atleast_1d(t.data) for t in tensors]
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise ShapeError(f"concat: mixed ranks {[p.shape for p in parts]}")
    out = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)].reshape(t.data.shape))
        return tuple(grads)

    return Tensor(tape, out, "concat", tuple(tensors), vjp)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if a.data.ndim == 0:
        raise ShapeError("slice: cannot slice a scalar")
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of shape {a.data.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl]  # view; tensors are never mutated in place

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return Tensor(a.tape, out, "slice", (a,), vjp)


def log_sum_exp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Overflow-safe log(sum(exp(a))) with softmax gradient."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_k = m + np.log(total)
    if keepdims or a.data.ndim == 0:
        out = out_k
    elif axis is None:
        out = out_k.reshape(())
    else:
        out = np.squeeze(out_k, axis=axis)
    soft = shifted / total

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, soft.shape) * soft,)

    return Tensor(a.tape, np.asarray(out), "log_sum_exp", (a,), vjp)


def check_gradients(f, params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f(tape, leaves)`` must build and return a scalar Tensor from the leaf
    map. The relative error per element is |ad - cd| / max(1, |cd|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: _as_array(v) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    root = f(tape, leaves)
    if root.data.size != 1:
        raise ShapeError(f"check_gradients: f must return a scalar, got {root.data.shape}")
    grads = tape.backward(root)

    def value_at(p: dict[str, np.ndarray]) -> float:
        t = Tape()
        lv = {k: t.leaf(v) for k, v in p.items()}
        val = float(f(t, lv).data)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite objective during finite differencing")
        return val

    worst = 0.0
    for name, base in params.items():
        ad = grads.get(leaves[name].nid)
        ad = np.zeros_like(base) if ad is None else ad
        for idx in np.ndindex(base.shape if base.shape else (1,)):
            perturbed = {k: v.copy() for k, v in params.items()}
            ref = perturbed[name] if base.shape else perturbed[name].reshape(1)
            orig = ref[idx]
            ref[idx] = orig + step
            hi = value_at(perturbed)
            ref[idx] = orig - step
            lo = value_at(perturbed)
            cd = (hi - lo) / (2.0 * step)
            av = float(ad[idx] if base.shape else ad)
            worst = max(worst, abs(av - cd) / max(1.0, abs(cd)))
    return worst
