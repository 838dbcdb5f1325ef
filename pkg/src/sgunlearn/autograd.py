"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the result keeps references to its parents and a closure mapping the
upstream gradient to one gradient per parent; :meth:`Tensor.backward` walks
that tape in reverse topological order.

The op set is deliberately closed: matmul, add, mul, relu, sigmoid, log, exp,
sum, mean, gather, concat, reshape, softmax, softmax_cross_entropy and
logistic_loss, plus :func:`make_op` for layers that supply their own
vector-Jacobian product (the attacker's implicit-differentiation layer).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError

__all__ = [
    "Tensor",
    "as_tensor",
    "make_op",
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "sum",
    "mean",
    "gather",
    "concat",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "logistic_loss",
    "finite_diff_grad",
]


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _vjp: Callable | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() root is not on the tape")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of ``op``.

    ``vjp(upstream)`` must return one array (or None) per parent, shaped like
    that parent. The tape is only extended when a parent requires a gradient.
    """
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, _parents=tuple(parents), _vjp=vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ContractError(f"{op}: shapes {a} and {b} do not broadcast") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return make_op("matmul", av @ bv, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op("add", a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return make_op("mul", av * bv, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("non-finite value produced by op 'log' (non-positive input)")
    xv = x.data
    return make_op("log", np.log(xv), (x,), lambda g: (g / xv,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return make_op("exp", e, (x,), lambda g: (g * e,))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", np.sum(x.data, axis=axis), (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    if n == 0:
        raise ContractError("mean of an empty tensor")

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_op("mean", np.mean(x.data, axis=axis), (x,), vjp)


def gather(x, index) -> Tensor:
    """Select entries along axis 0 (rows of a matrix, items of a vector)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("gather: index must be one-dimensional")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ContractError(f"gather: index out of range for axis of length {x.shape[0]}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_op("gather", x.data[idx], (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no inputs")
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", value, ts, vjp)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {old} into {shape}") from None
    return make_op("reshape", value, (x,), lambda g: (g.reshape(old),))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis."""
    x = as_tensor(x)
    s = _softmax(x.data)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return make_op("softmax", s, (x,), vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-row cross-entropy ``-log softmax(logits)[target]`` (natural log)."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ContractError("softmax_cross_entropy: logits must be n x K")
    n, k = logits.shape
    if t.shape != (n,) or not np.issubdtype(t.dtype, np.integer):
        raise ContractError("softmax_cross_entropy: targets must be n integer labels")
    if n and (t.min() < 0 or t.max() >= k):
        raise ContractError("softmax_cross_entropy: target out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(n)
    losses = lse - z[rows, t]

    def vjp(g):
        d = _softmax(z)
        d[rows, t] -= 1.0
        return (d * g[:, None],)

    return make_op("softmax_cross_entropy", losses, (logits,), vjp)


def logistic_loss(margins) -> Tensor:
    """Elementwise ``log(1 + exp(-m))``."""
    m = as_tensor(margins)
    value = np.logaddexp(0.0, -m.data)
    return make_op("logistic_loss", value, (m,), lambda g: (-g * _sigmoid(-m.data),))


def finite_diff_grad(f: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a fresh constant :class:`Tensor` per evaluation and may
    return a Tensor or a float.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad: eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.size)

    def evaluate(v):
        r = f(Tensor(v.reshape(base.shape)))
        return float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (evaluate(xp) - evaluate(xm)) / (2.0 * eps)
    return out.reshape(base.shape)
