"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it
whenever at least one input requires a gradient. Outside a tape every
operation is a plain numpy computation, which is how evaluation runs.

Stop-gradient values and discrete decisions (top-F masks, argmax indices)
are routed through :func:`freeze_value`. During finite-difference checking
they are recorded once at the base point and replayed for every perturbed
evaluation, so the numeric derivative differentiates the same surrogate as
the analytic backward pass.
"""

from __future__ import annotations

import threading
from collections.abc import Sequence
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .rng import Rng

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_local = threading.local()


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, name: str | None = None):
        self.op = op
        self.name = name
        where = f" ({name})" if name else ""
        super().__init__(f"non-finite values produced by '{op}'{where}")


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("construct", name)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        t = cls.__new__(cls)
        if not np.isfinite(arr).all():
            raise NonFiniteError(op)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = op
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), "const")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor._wrap(np.asarray(data, dtype=np.float64), op)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape._record(out)
    return out


class Tape:
    """Ordered record of one forward pass; supports exactly one backward."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._used = False

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("tape already consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, t: Tensor) -> None:
        if self._used:
            raise TapeError("cannot record on a tape after backward")
        self.nodes.append(t)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if self._used:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, grads.pop(id(loss)))
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


# ---------------------------------------------------------------------------
# stop-gradient freezing
# ---------------------------------------------------------------------------


class FrozenValues:
    """Record/replay buffer for stop-gradient values, in call order."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self._pos = 0

    def take(self, arr: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(np.array(arr, copy=True))
            return arr
        if self._pos >= len(self.values):
            raise RuntimeError("forward pass froze more values than were recorded")
        value = self.values[self._pos]
        self._pos += 1
        if value.shape != np.shape(arr):
            raise RuntimeError("frozen value shape changed between evaluations")
        return value

    def rewind(self) -> None:
        self.replaying = True
        self._pos = 0

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self.values)


@contextmanager
def frozen(values: FrozenValues):
    prev = getattr(_local, "frozen", None)
    _local.frozen = values
    try:
        yield values
    finally:
        _local.frozen = prev


def freeze_value(arr: np.ndarray) -> np.ndarray:
    buf = getattr(_local, "frozen", None)
    return arr if buf is None else buf.take(arr)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._wrap(freeze_value(x.data), "stop_gradient")


sg = stop_gradient


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def erf(a) -> Tensor:
    a = as_tensor(a)
    return _make(_erf(a.data), (a,),
                 lambda g: (g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data * a.data),), "erf")


def gelu(a) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(x * cdf, (a,), bw, "gelu")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(mask, float(value), a.data), (a,),
                 lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int = -1, j: int = -2) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concatenate")


def take(a, index) -> Tensor:
    """Numpy-style indexing (slices, integer arrays); gradient scatter-adds."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not tensors")

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _make(a.data[index], (a,), bw, "take")


def embedding(table, indices: np.ndarray, padding_idx: int | None = None) -> Tensor:
    """Gather rows of ``table``.

    Lookups of ``padding_idx`` read as zeros and never send gradient back,
    whatever the stored padding row holds.
    """
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[indices]
    if padding_idx is not None:
        out[indices == padding_idx] = 0.0

    def bw(g):
        z = np.zeros_like(table.data)
        np.add.at(z, indices, g)
        if padding_idx is not None:
            z[padding_idx] = 0.0
        return (z,)

    return _make(out, (table,), bw, "embedding")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = g @ b.data.T
            elif a.ndim == 2 and g.ndim > 2:
                # fold batch dims: sum_b g_b @ B_b^T
                bb = np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
                ga = np.einsum("bik,bjk->ij", g.reshape((-1,) + g.shape[-2:]), bb)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax; entries where ``mask`` is False get probability 0.

    A slice with no valid entry is all zeros.
    """
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ValueError("cannot L2-normalize a zero vector")
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), bw, "l2_normalize")


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Row-wise cosine; pairs with a zero vector score exactly 0 with zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    dot = (a.data * b.data).sum(axis=axis)
    na2 = (a.data * a.data).sum(axis=axis)
    nb2 = (b.data * b.data).sum(axis=axis)
    denom = np.sqrt(na2 * nb2)
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    cos = np.where(ok, dot / safe, 0.0)

    def bw(g):
        scale = np.where(ok, g / safe, 0.0)
        c_over_na2 = np.where(ok, g * cos / np.where(na2 > 0, na2, 1.0), 0.0)
        c_over_nb2 = np.where(ok, g * cos / np.where(nb2 > 0, nb2, 1.0), 0.0)
        ex = lambda v: np.expand_dims(v, axis)
        ga = ex(scale) * b.data - ex(c_over_na2) * a.data
        gb = ex(scale) * a.data - ex(c_over_nb2) * b.data
        return (ga, gb)

    return _make(cos, (a, b), bw, "cosine_similarity")


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def gumbel_noise(shape, rng: Rng) -> Tensor:
    """Gumbel(0, 1) samples ``-log(-log(u))``, ``u`` clamped away from {0, 1}."""
    return Tensor._wrap(rng.gumbel(shape), "gumbel_noise")
