"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record to the active :class:`GradTape`.
:func:`backward` replays the tape in reverse record order, which is a valid
topological order because records are appended as outputs are created.

Broadcasting is deliberately narrow: operands must have identical shapes, or
one of them must be a scalar. Anything else goes through :func:`expand`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    vjp: VJP


class GradTape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp: VJP) -> None:
        out.node_id = len(self.records)
        self.records.append(_Record(out, inputs, vjp))

    def clear(self) -> None:
        for rec in self.records:
            rec.out.node_id = None
        self.records.clear()


_active_tape = GradTape()


def get_tape() -> GradTape:
    return _active_tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, values={self.values!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, e: pow(self, e)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out = Tensor(values, requires_grad=True)
        tape.record(out, inputs, vjp)
        return out
    return Tensor(values)


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.values + b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.values - b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_reduce_to(g / bv, a.shape), _reduce_to(-g * out / bv, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def pow(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("pow supports a constant real exponent only")
    e = float(exponent)
    av = a.values
    return _make(av ** e, (a,), lambda g: (g * e * av ** (e - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(av),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.clip(av, lo, hi)
    mask = np.ones_like(av, dtype=bool)
    if lo is not None:
        mask &= av >= lo
    if hi is not None:
        mask &= av <= hi
    return _make(out, (a,), lambda g: (g * mask,))


# lgamma / digamma --------------------------------------------------------

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def lgamma_np(x) -> np.ndarray:
    """log Gamma(x) for x > 0 (Lanczos, g=7, 9 terms; reflection below 0.5)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        bad = x[~(x > 0)].ravel()[0]
        raise DomainError(f"lgamma requires positive arguments, got {bad}")
    small = x < 0.5
    y = np.where(small, 1.0 - x, x) - 1.0
    acc = np.full_like(y, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        acc = acc + _LANCZOS_COEF[i] / (y + i)
    t = y + _LANCZOS_G + 0.5
    lg = _HALF_LOG_2PI + (y + 0.5) * np.log(t) - t + np.log(acc)
    if np.any(small):
        xs = np.where(small, x, 0.25)
        refl = np.log(np.pi / np.sin(np.pi * xs)) - lg
        lg = np.where(small, refl, lg)
    return lg


def digamma_np(x) -> np.ndarray:
    """psi(x) for x > 0 via upward recurrence to x >= 6 and the asymptotic series."""
    x = np.array(x, dtype=np.float64, copy=True)
    res = np.zeros_like(x)
    for _ in range(7):
        m = x < 6.0
        if not m.any():
            break
        res[m] -= 1.0 / x[m]
        x[m] += 1.0
    f = 1.0 / (x * x)
    series = f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f / 132))))
    return res + np.log(x) - 0.5 / x - series


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _make(lgamma_np(av), (a,), lambda g: (g * digamma_np(av),))


# reductions and structure ------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.values, axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def expand(a, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape``; the backward pass sums."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def vjp(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(src),)

    return _make(out.copy(), (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.values[index]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.values, axis=axis), (a,), vjp)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient of ``soft``."""
    return add(soft, Tensor(np.asarray(hard, dtype=np.float64) - soft.values))


# reverse pass ------------------------------------------------------------

def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    tape = tape or get_tape()
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or not len(tape):
        raise ValueError("backward: loss is not connected to any recorded operation")
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for rec in reversed(tape.records[: loss.node_id + 1]):
        g = pending.pop(rec.out.node_id, None)
        if g is None:
            continue
        rec.out.grad = g
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi
