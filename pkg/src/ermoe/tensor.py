"""Dense float64 tensors with a recorded reverse-mode gradient tape.

Every primitive builds its output eagerly with numpy and, when any input
is tracked, registers a closure computing the vector-Jacobian product.
Nodes carry a creation counter; sorting the ancestors of a root by that
counter gives a topological order, so `backward` replays the tape in
reverse exactly once per node.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

EPS = 1e-12

_counter = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class FactorizationError(ArithmeticError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_counter)
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = parents if tracked else ()
        out._backward = backward if tracked else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _raise_scalar():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._result(out, (a, b), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, 2.0 * a.data * g)

    return Tensor._result(a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * 0.5 / out)

    return Tensor._result(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return Tensor._result(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, g / a.data)

    return Tensor._result(np.log(a.data), (a,), bw)


def absolute(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, g * np.sign(a.data))

    return Tensor._result(np.abs(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    """max(a, 0); the subgradient at 0 is taken as 0."""
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return Tensor._result(np.where(mask, a.data, 0.0), (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * inside)

    return Tensor._result(np.clip(a.data, lo, hi), (a,), bw)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _acc(a, g * (cdf + x * pdf))

    return Tensor._result(x * cdf, (a,), bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._result(np.where(mask, a.data, b.data), (a, b), bw)


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------------- structure


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _acc(a, g.reshape(a.shape))

    return Tensor._result(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def bw(g):
        _acc(a, np.swapaxes(g, i, j))

    return Tensor._result(np.swapaxes(a.data, i, j), (a,), bw)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along `axis` with a 1-D integer index array (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take expects 1-D indices")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        _acc(a, full)

    return Tensor._result(np.take(a.data, idx, axis=axis), (a,), bw)


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        # indices are distinct along `axis`, so overwrite is a valid scatter
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis)
        _acc(a, full)

    return Tensor._result(np.take_along_axis(a.data, idx, axis=axis), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            _acc(t, np.take(g, i, axis=axis))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _acc(t, piece)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -------------------------------------------------------------------- products


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims.

    A 1-D right operand is treated as a column vector.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-D operands")
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if b.ndim == 1:
            if a.requires_grad:
                _acc(a, _unbroadcast(g[..., :, None] * b.data, a.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(np.einsum("...ij,...i->...j", a.data, g), b.shape).reshape(b.shape))
            return
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        g2 = g[..., None, :] if a.ndim == 1 else g
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b.data, -1, -2)
            if a.ndim == 1:
                ga = ga[..., 0, :]
            _acc(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b.shape))

    return Tensor._result(out, (a, b), bw)


# ------------------------------------------------------- normalization/softmax


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - inner) / temperature)

    return Tensor._result(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _acc(a, g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (a,), bw)


def l2_normalize(a: Tensor, eps: float = EPS, axis: int = -1) -> Tensor:
    """a / max(||a||, eps) along `axis`."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    big = norm >= eps
    den = np.where(big, norm, eps)
    out = a.data / den

    def bw(g):
        # below eps the denominator is a constant
        radial = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, np.where(big, (g - out * radial) / den, g / eps))

    return Tensor._result(out, (a,), bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(a, axis=-1, keepdims=True)
    centered = a - mu
    var = mean(square(centered), axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


# ------------------------------------------------------------------- backward


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Replay the tape from a scalar `root`; return {param: gradient}.

    Parameters listed in `params` that the root does not depend on get an
    all-zero gradient.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    for t in order:
        t.grad = None
    root.grad = np.ones_like(root.data)
    leaves = {}
    for t in order:
        if t._backward is not None:
            t._backward(t.grad)
            t.grad = None
        else:
            leaves[t._id] = t
    result = {}
    if params is None:
        params = leaves.values()
    for p in params:
        g = p.grad if (p._id in leaves and p.grad is not None) else np.zeros_like(p.data)
        result[p] = g
        p.grad = None
    return result


# ----------------------------------------------------- plain numeric helpers


def cosine(u, v, eps: float = EPS) -> tuple[float, bool]:
    """Cosine of two vectors clamped to [-1, 1]; (0.0, True) if either is ~0."""
    u = np.asarray(getattr(u, "data", u), dtype=np.float64)
    v = np.asarray(getattr(v, "data", v), dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < eps or nv < eps:
        return 0.0, True
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c)), False


def qr_orthonormalize(m, tol: float = 1e-10) -> np.ndarray:
    """Q of a thin QR with nonnegative diagonal of R.

    Raises FactorizationError naming the first column whose residual after
    projection is below `tol` relative to the largest column norm.
    """
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if m.ndim != 2 or m.shape[1] > m.shape[0]:
        raise DimensionError(f"qr_orthonormalize needs a tall d x r matrix, got {m.shape}")
    q, r = np.linalg.qr(m)
    diag = np.diag(r)
    scale = max(np.abs(m).max(), 1e-300)
    bad = np.flatnonzero(np.abs(diag) <= tol * scale)
    if bad.size:
        raise FactorizationError(f"column {int(bad[0])} is linearly dependent on earlier columns")
    signs = np.where(diag < 0, -1.0, 1.0)
    return q * signs
