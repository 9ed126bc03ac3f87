"""Dense arrays with tape-based reverse-mode differentiation.

Every operation executed on a :class:`DiffArray` that requires gradients is
appended to the active :class:`Tape`.  :func:`backward` replays the tape in
reverse, so each recorded operation is visited exactly once.

    >>> x = DiffArray([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_EXP_LIMIT = 709.0

_state = threading.local()


class Tape:
    """Ordered record of the operations executed since it was opened."""

    def __init__(self):
        self.nodes: list[DiffArray] = []
        self._ids: set[int] = set()

    def record(self, node: "DiffArray") -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node) -> bool:
        return id(node) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()
        self._ids.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self
        self.clear()


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = [Tape()]
        _state.grad_enabled = True
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class DiffArray:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def mT(self):
        return swap_last(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return abs_(self)


ArrayLike = "DiffArray | np.ndarray | float"


def as_diff(x, like: DiffArray | None = None) -> DiffArray:
    """Wrap constants; arrays already on the tape pass through untouched."""
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[DiffArray], backward_fn) -> DiffArray:
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        current_tape().record(out)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, reversing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_args(a, b):
    if not isinstance(a, DiffArray):
        a = as_diff(a, like=b)
    if not isinstance(b, DiffArray):
        b = as_diff(b, like=a)
    return a, b


# -- elementwise ---------------------------------------------------------
def add(a, b) -> DiffArray:
    a, b = _binary_args(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffArray:
    a, b = _binary_args(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffArray:
    a, b = _binary_args(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> DiffArray:
    a, b = _binary_args(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> DiffArray:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> DiffArray:
    a = as_diff(a)
    if np.any(a.data > _EXP_LIMIT):
        raise FloatingPointError("exp argument exceeds the 64-bit range")
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def abs_(a) -> DiffArray:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> DiffArray:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward_fn)


# -- shape manipulation ----------------------------------------------------
def reshape(a, shape) -> DiffArray:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a, axes) -> DiffArray:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a) -> DiffArray:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a, shape) -> DiffArray:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, src),))


def getitem(a, index) -> DiffArray:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    src, dtype = a.shape, a.dtype

    def backward_fn(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> DiffArray:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return getitem(a, tuple(index))


def concat_last_axis(parts: Sequence[DiffArray]) -> DiffArray:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_last_axis needs at least one part")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ValueError(f"cannot concatenate shapes {parts[0].shape} and {p.shape}: "
                             "leading axes differ")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, parts, backward_fn)


# -- reductions ------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> DiffArray:
    src = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward_fn)


def mean(a, axis=None, keepdims=False) -> DiffArray:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> DiffArray:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _binary_args(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs arrays of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape} "
                         f"(inner sizes {a.shape[-1]} != {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch axes not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): one large GEMM over the flattened leading axes
        a2 = ad.reshape(-1, sa[-1])
        out = (a2 @ bd).reshape(sa[:-1] + (sb[-1],))

        def backward_fn(g):
            g2 = g.reshape(-1, sb[-1])
            ga = (g2 @ bd.T).reshape(sa) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward_fn)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_matmul(g, np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            gb = _reduce_matmul(np.swapaxes(ad, -1, -2), g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), backward_fn)


def _reduce_matmul(x: np.ndarray, y: np.ndarray, shape: tuple) -> np.ndarray:
    """``x @ y`` summed down to ``shape`` without materializing broadcast copies."""
    if len(shape) == 2 and (x.ndim > 2 or y.ndim > 2):
        # contract the broadcast batch axes inside a single einsum
        lead = max(x.ndim, y.ndim) - 2
        letters = "abcdefgh"[:lead]
        xs = letters[lead - (x.ndim - 2):] + "ij"
        ys = letters[lead - (y.ndim - 2):] + "jk"
        return np.einsum(f"{xs},{ys}->ik", x, y, optimize=True)
    return unbroadcast(x @ y, shape)


def softmax_last_axis(x) -> DiffArray:
    x = as_diff(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward_fn)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> DiffArray:
    """Normalize each last-axis slice to zero mean / unit variance, then scale."""
    x, gain, bias = as_diff(x), as_diff(gain), as_diff(bias)
    n = x.shape[-1]
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ValueError(f"layer_norm gain/bias length must equal {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward_fn)


# -- backward pass -------------------------------------------------------------
def backward(loss: DiffArray) -> None:
    """Populate ``.grad`` of every requires-grad array that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers of leaf arrays, so
    callers zero them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any array that requires grad")
    tape = current_tape()
    if loss._backward is not None and loss not in tape:
        raise ValueError("loss was not produced on the current tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, DiffArray] = {}
    if loss._backward is None:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = unbroadcast(np.asarray(pg), parent.shape)
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = pending.pop(key)
        leaf.grad = g.astype(leaf.dtype, copy=True) if leaf.grad is None else leaf.grad + g


# -- verification ----------------------------------------------------------------
def grad_check(f: Callable[[], DiffArray], params, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    Returns the largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, DiffArray):
        params = [params]
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("f returned a non-finite value")
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(np.asarray(_value(f())).reshape(-1)[0])
                flat[i] = orig - step
                fm = float(np.asarray(_value(f())).reshape(-1)[0])
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("f returned a non-finite value")
                num = (fp - fm) / (2 * step)
                a = float(gflat[i])
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
    return worst


def _value(x):
    return x.data if isinstance(x, DiffArray) else x


def parameters_grad_norm(params: Iterable[DiffArray]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
