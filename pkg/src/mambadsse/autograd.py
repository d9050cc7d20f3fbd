"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a backward rule. Nodes carry a global sequence number taken at
recording time, so walking the reachable nodes in descending sequence order
is exactly a reverse replay of the recording order (which is also a valid
reverse topological order).

Broadcasting is restricted to right-aligned trailing dimensions: a smaller
operand may omit leading axes or use size-1 axes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation with frozen parameters)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class IndexedGrad:
    """Sparse gradient contribution: ``grad`` lands at ``parent[index]``."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``op``; put it on the tape if any parent needs grads.

    ``backward(g)`` must return one entry per parent: an ndarray of the parent's
    shape, an :class:`IndexedGrad`, or ``None``.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite output (input shapes {[p.shape for p in parents]})")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t.name = None
    t._seq = next(_seq)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not trailing-dimension compatible") from None


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of right-aligned broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# closed op set


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), -unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    """Elementwise division (each entry is an independent scalar division)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: zero entry in denominator")
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), backward)


def scalar_div(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if s == 0.0:
        raise ZeroDivisionError("scalar-div by zero")
    return record("scalar-div", a.data / s, (a,), lambda g: (g / s,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return record("softplus", np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("reduce-sum", np.asarray(out), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1) if a.data.size else 1.0

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return record("reduce-mean", np.asarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return record("concat", out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    basic = _is_basic_index(index)
    if basic:
        out = out.copy()
    return record("slice", out, (a,), lambda g: (IndexedGrad(index, g),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape("broadcast", a.shape, shape)
    sa = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return record("broadcast", out, (a,), lambda g: (unbroadcast(g, sa),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {sa} as {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(sa),))


# convenience compositions -------------------------------------------------


def silu(a: Tensor) -> Tensor:
    return a * sigmoid(a)


def mse(pred: Tensor, target) -> Tensor:
    return reduce_mean(square(pred - as_tensor(target)))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns a map from leaf tensor to its gradient for this call. Tensors in
    ``params`` that are unreachable from ``loss`` appear with zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    nodes: dict[int, Tensor] = {}
    stack_: list[Tensor] = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack_.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}

    def accumulate(p: Tensor, contrib) -> None:
        pid = id(p)
        if isinstance(contrib, IndexedGrad):
            buf = grads.get(pid)
            if buf is None or pid not in owned:
                new = np.zeros(p.shape)
                if buf is not None:
                    new += buf
                grads[pid] = buf = new
                owned.add(pid)
            if _is_basic_index(contrib.index):
                buf[contrib.index] += contrib.grad
            else:
                np.add.at(buf, contrib.index, contrib.grad)
            return
        contrib = np.asarray(contrib)
        if contrib.shape != p.shape:
            contrib = np.broadcast_to(contrib, p.shape)
        buf = grads.get(pid)
        if buf is None:
            grads[pid] = contrib
        elif pid in owned:
            buf += contrib
        else:
            grads[pid] = buf + contrib
            owned.add(pid)

    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        owned.discard(id(t))
        if g is None:
            continue
        if t._backward is None:
            leaves[id(t)] = t
            grads[id(t)] = g
            continue
        for p, c in zip(t._parents, t._backward(g)):
            if c is not None and p.requires_grad:
                accumulate(p, c)

    out: dict[Tensor, np.ndarray] = {}
    for lid, leaf in leaves.items():
        g = np.array(grads[lid], dtype=np.float64)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros(p.shape)
                if p.grad is None:
                    p.grad = np.zeros(p.shape)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the entries of ``x`` (in place)."""
    g = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences."""
    for x in inputs:
        x.grad = None
    grads = backward(fn(), params=inputs)
    worst = 0.0
    for x in inputs:
        worst = max(worst, relative_error(grads[x], numerical_grad(fn, x, eps)))
    return worst
