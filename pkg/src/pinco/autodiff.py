"""Reverse-mode automatic differentiation over dense float64 arrays.

A thin tape-based engine: every operation on tensors that require
gradients appends a record (inputs, output, local-derivative closure) to a
thread-local tape.  ``backward`` replays the tape in reverse, accumulating
gradients into ``Tensor.grad``, and frees the tape afterwards.  Only first
order derivatives are supported; tensors are dense and double precision.

Subgradient conventions at non-smooth points: d|x|/dx = 0 at x = 0 and
d max(c, x)/dx = 0 at x = c, so hinge terms exert no force exactly at the
constraint boundary.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class NonScalarLoss(ValueError):
    """Raised when backward() is called on a tensor that is not a scalar."""


class Tensor:
    """A dense float64 array plus gradient bookkeeping."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _TapeState(threading.local):
    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True


_tape = _TapeState()


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _tape.enabled
        _tape.enabled = False
        return self

    def __exit__(self, *exc):
        _tape.enabled = self._prev
        return False


def tape_size() -> int:
    return len(_tape.entries)


def clear_tape() -> None:
    _tape.entries.clear()


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.entries.append((out, inputs, backward_fn))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the tape.

    The loss must be a scalar.  Gradients add onto any existing .grad so a
    tensor used several times receives the sum of its contributions; callers
    reset .grad to None between steps.  The tape is freed on exit.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    entries = _tape.entries
    try:
        loss.grad = np.ones_like(loss.values)
        for out, inputs, backward_fn in reversed(entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
                t.grad += g
    finally:
        _tape.entries = []


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values + b.values)
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from None
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values - b.values)
    except ValueError:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from None
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values * b.values)
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from None
    av, bv = a.values, b.values
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)
    av, bv = a.values, b.values
    _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values)
    _record(out, (a,), lambda g: (-g,))
    return out


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(a, fwd, local_grad) -> Tensor:
    a = as_tensor(a)
    out = Tensor(fwd(a.values))

    def bw(g):
        return (g * local_grad(a.values, out.values),)

    _record(out, (a,), bw)
    return out


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def tanhshrink(a) -> Tensor:
    """x - tanh(x); derivative tanh(x)^2."""
    return _unary(a, lambda x: x - np.tanh(x), lambda x, y: np.tanh(x) ** 2)


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float))


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; derivative 0 at the tie point."""
    return _unary(a, lambda x: np.maximum(x, c), lambda x, y: (x > c).astype(float))


def absolute(a) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def square(a) -> Tensor:
    return _unary(a, np.square, lambda x, y: 2.0 * x)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.sum(axis=axis))
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    _record(out, (a,), bw)
    return out


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    out = Tensor(a.values.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tuple(parts), bw)
    return out


def gather(a, index: np.ndarray) -> Tensor:
    """Select rows (axis 0) of a by integer index."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = Tensor(a.values[index])
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        np.add.at(ga, index, g)
        return (ga,)

    _record(out, (a,), bw)
    return out


def scatter_add(a, index: np.ndarray, size: int) -> Tensor:
    """Accumulate rows of a into ``size`` slots along axis 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    acc = np.zeros((size,) + a.shape[1:])
    np.add.at(acc, index, a.values)
    out = Tensor(acc)
    _record(out, (a,), lambda g: (g[index],))
    return out


def segment_softmax(scores, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a 1-D score vector computed independently per segment."""
    scores = as_tensor(scores)
    segments = np.asarray(segments, dtype=np.intp)
    s = scores.values
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, s)
    e = np.exp(s - seg_max[segments])
    denom = np.zeros(n_segments)
    np.add.at(denom, segments, e)
    alpha = e / denom[segments]
    out = Tensor(alpha)

    def bw(g):
        # d softmax: alpha * (g - sum_within_segment(alpha * g))
        dot = np.zeros(n_segments)
        np.add.at(dot, segments, alpha * g)
        return (alpha * (g - dot[segments]),)

    _record(out, (scores,), bw)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def check_grad(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable (a closure over ``params``) returning a
    scalar tensor.  The error is computed per parameter tensor as
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12) with |.| the
    Euclidean norm, and the max over tensors is returned.  (An entrywise
    comparison is meaningless at this step size: central differences on a
    float64 loss carry ~ulp(loss)/2eps of cancellation noise, which swamps
    near-zero gradient entries while leaving norms intact.)
    """
    for p in params:
        p.grad = None
    clear_tape()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.values.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = float(f().values)
                flat[i] = keep - eps
                dn = float(f().values)
                flat[i] = keep
                numeric[i] = (up - dn) / (2.0 * eps)
            na = np.linalg.norm(ga.reshape(-1))
            nn = np.linalg.norm(numeric)
            err = np.linalg.norm(ga.reshape(-1) - numeric) / (na + nn + 1e-12)
            worst = max(worst, err)
    return worst
