"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each operation returns a new :class:`Tensor` holding a reference to its
inputs and a closure that maps the output gradient to input gradients.
:func:`backward` walks that graph once in reverse topological order and
accumulates into ``.grad`` of every leaf created with ``requires_grad``.

There is no broadcasting: binary elementwise ops require equal shapes, and
the only mixed-shape ops are :func:`scale` (python scalar) and
:func:`add_rowvec` (bias add).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS_LOG = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    A, B = a.data, b.data
    return _make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {list(a.shape)}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a weight stored as [out, in]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    X, W = x.data, w.data
    return _make(X @ W.T, (x, w), lambda g: (g @ W, g.T @ X), "linear")


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` [m] to every row of ``a`` [n, m]."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_rowvec: {list(a.shape)} and {list(b.shape)}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_rowvec")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = EPS_LOG) -> Tensor:
    """Guarded natural log, ``log(x + eps)``."""
    if a.data.size and (a.data <= -eps).any():
        bad = float(a.data[a.data <= -eps].reshape(-1)[0])
        raise DomainError(f"log of non-positive value {bad!r}")
    shifted = a.data + eps
    with np.errstate(divide="ignore"):
        out = np.log(shifted)
    return _make(out, (a,), lambda g: (g / shifted,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids exp overflow on either tail
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- reductions / reshaping

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        return _make(np.array(0.0), (a,), lambda g: (np.zeros(a.shape),), "mean")
    shape = a.shape
    return _make(np.array(a.data.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects [n, K>=1], got {list(a.shape)}")
    z = a.data - a.data.max(axis=1, keepdims=True) if a.shape[0] else a.data
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True) if a.shape[0] else e

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), back, "softmax_rows")


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: {list(a.shape)} with {idx.shape[0] if idx.ndim else 0} indices")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx], (a,), back, "pick")


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back, "take_rows")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: {list(a.shape)} and {list(b.shape)}")
    k = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]), "concat_cols")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {list(a.shape)} and {list(b.shape)}")
    k = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b),
                 lambda g: (g[:k], g[k:]), "concat_rows")


def outer_rows(f: Tensor, p: Tensor) -> Tensor:
    """Row-wise flattened outer product; column ``a*K + b`` is ``f[:, a] * p[:, b]``."""
    if f.data.ndim != 2 or p.data.ndim != 2 or f.shape[0] != p.shape[0]:
        raise DimensionError(f"outer_rows: row-count mismatch {list(f.shape)} vs {list(p.shape)}")
    n, d = f.shape
    K = p.shape[1]
    F, P = f.data, p.data
    out = (F[:, :, None] * P[:, None, :]).reshape(n, d * K)

    def back(g):
        g3 = g.reshape(n, d, K)
        return ((g3 * P[:, None, :]).sum(axis=2), (g3 * F[:, :, None]).sum(axis=1))

    return _make(out, (f, p), back, "outer_rows")


def detach(a: Tensor) -> Tensor:
    out = Tensor(a.data)
    out.op = "detach"
    return out


def custom(a: Tensor, forward: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    """Single-input op with caller-supplied forward value and backward rule."""
    return _make(forward, (a,), lambda g: (grad_fn(g),), op)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
