"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every operation returns a new :class:`Value` holding its result, the ids of
its parents and a closure that pushes the output gradient back to them.
Node ids come from a global counter, so sorting reachable nodes by id gives
a valid reverse topological order for the backward sweep.

The graph is rebuilt on each forward pass. Constants (``requires_grad=False``)
are skipped during backpropagation.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Value:
    """A node of the computation graph.

    Parameters
    ----------
    data : array_like
        Stored as a float64 array.
    requires_grad : bool
        Leaves created with ``requires_grad=False`` are constants.
    """

    __array_priority__ = 1000  # numpy defers to our reflected operators

    def __init__(
        self,
        data,
        parents: Sequence["Value"] = (),
        op: str = "leaf",
        requires_grad: bool = True,
        name: str | None = None,
    ):
        self.id = next(_ids)
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def constant(data) -> Value:
    return Value(data, requires_grad=False, op="const")


def as_value(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _node(data, parents: Sequence[Value], op: str, backward) -> Value:
    out = Value(data, parents=parents, op=op, requires_grad=False)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Value, b: Value, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        a._accumulate(unbroadcast(g, a.shape))
        b._accumulate(unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        a._accumulate(unbroadcast(g, a.shape))
        b._accumulate(unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def power(a, p: float) -> Value:
    a = as_value(a)
    p = float(p)
    out = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out, (a,), "pow", backward)


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, (a,), "exp", backward)


def log(a) -> Value:
    """Natural log with the argument clamped below at ``LOG_CLAMP``."""
    a = as_value(a)
    clamped = np.maximum(a.data, LOG_CLAMP)

    def backward(g):
        a._accumulate(np.where(a.data > LOG_CLAMP, g / clamped, 0.0))

    return _node(np.log(clamped), (a,), "log", backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), "sigmoid", backward)


def elu(a) -> Value:
    a = as_value(a)
    neg = a.data < 0
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, em1, a.data)

    def backward(g):
        a._accumulate(g * np.where(neg, em1 + 1.0, 1.0))

    return _node(out, (a,), "elu", backward)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (a.data @ b.data).shape)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.data @ b.data).shape)
    out = a.data @ b.data

    def backward(g):
        A, B = a.data, b.data
        if a.requires_grad:
            a._accumulate(unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape))
        if b.requires_grad:
            if B.ndim == 2:
                # weight shared across leading dims: one big GEMM
                b._accumulate(A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape))

    return _node(out, (a, b), "matmul", backward)


def trace(a) -> Value:
    a = as_value(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace: expected a square matrix, got shape {a.shape}")
    n = a.shape[0]

    def backward(g):
        a._accumulate(np.eye(n) * g)

    return _node(np.trace(a.data), (a,), "trace", backward)


def matrix_power(a, k: int) -> Value:
    """``a`` multiplied by itself ``k`` times (``k >= 0``)."""
    a = as_value(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix_power: expected a square matrix, got shape {a.shape}")
    if k < 0:
        raise ValueError("matrix_power: k must be non-negative")
    if k == 0:
        return constant(np.eye(a.shape[0]))
    out = a
    for _ in range(k - 1):
        out = matmul(out, a)
    return out


def transpose(a) -> Value:
    a = as_value(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), (a,), "transpose", backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, (a,), "reshape", backward)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None

    def backward(g):
        a._accumulate(unbroadcast(g, a.shape))

    return _node(out, (a,), "broadcast", backward)


def getitem(a, idx) -> Value:
    a = as_value(a)
    out = a.data[idx]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(a.shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full)

    return _node(out, (a,), "getitem", backward)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        for v, piece in zip(vals, np.split(g, sizes, axis=axis)):
            v._accumulate(piece)

    return _node(out, vals, "concat", backward)


def upper_limit_integral(integral, x, integrand_at_x: np.ndarray) -> Value:
    """Attach the fundamental-theorem gradient to a quadrature result.

    ``integral`` is a quadrature of ``int_0^x f(t) dt`` computed with ``x``
    held constant; it carries the gradient with respect to everything the
    integrand depends on. This node adds ``d/dx = f(x)`` for the upper limit.
    """
    integral, x = as_value(integral), as_value(x)
    fx = np.asarray(integrand_at_x, dtype=np.float64)
    if integral.shape != x.shape or fx.shape != x.shape:
        raise ShapeError(
            f"upper_limit_integral: shapes {integral.shape}, {x.shape}, {fx.shape} differ"
        )

    def backward(g):
        integral._accumulate(g)
        x._accumulate(g * fx)

    return _node(integral.data.copy(), (integral, x), "integral", backward)


# ---------------------------------------------------------------------------
# evaluation and backpropagation


def eval(root: Value) -> np.ndarray:  # noqa: A001 - named after the operation it performs
    """Value held at ``root`` (the graph is evaluated eagerly while built)."""
    return root.data


def _reachable(root: Value) -> list[Value]:
    seen: set[int] = set()
    order: list[Value] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(p for p in node.parents if p.requires_grad and p.id not in seen)
    order.sort(key=lambda v: v.id, reverse=True)
    return order


def backward(root: Value, leaves: Iterable[Value] | None = None) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Returns a map from leaf id to gradient. When ``leaves`` is given, every one
    of them appears in the map; leaves with no path to ``root`` get zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = _reachable(root)
    for node in nodes:
        node.grad = None
    root.grad = np.ones(root.shape)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if leaves is None:
        return {n.id: n.grad for n in nodes if not n.parents and n.grad is not None}
    out = {}
    for leaf in leaves:
        g = leaf.grad if any(leaf is n for n in nodes) and leaf.grad is not None else None
        out[leaf.id] = g if g is not None else np.zeros(leaf.shape)
    return out


def grad(fn: Callable[..., Value], *arrays) -> list[np.ndarray]:
    """Gradients of scalar ``fn(*values)`` with respect to each array argument."""
    leaves = [Value(np.array(a, dtype=np.float64)) for a in arrays]
    g = backward(fn(*leaves), leaves)
    return [g[leaf.id] for leaf in leaves]


def matrix_power_trace(A, alpha: float, d: int | None = None) -> tuple[float, np.ndarray]:
    """``tr((I + alpha*A)^d) - d`` and its gradient with respect to ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"matrix_power_trace: expected a square matrix, got shape {A.shape}")
    if alpha <= 0:
        raise ValueError("matrix_power_trace: alpha must be positive")
    d = A.shape[0] if d is None else d
    leaf = Value(A)
    root = power_trace(leaf, alpha, d)
    g = backward(root, [leaf])[leaf.id]
    return float(root.data), g


def power_trace(A: Value, alpha: float, d: int) -> Value:
    """Tape version of :func:`matrix_power_trace` (value only; differentiable)."""
    n = A.shape[0]
    M = add(constant(np.eye(n)), mul(A, float(alpha)))
    return sub(trace(matrix_power(M, d)), float(d))


def bind(arrays: Mapping[str, np.ndarray]) -> dict[str, Value]:
    """Wrap named parameter arrays as fresh leaves for one forward pass."""
    return {k: Value(v, name=k) for k, v in arrays.items()}
