"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node on the active :class:`Tape` when at
least one of its inputs requires a gradient.  Calling :func:`backward` walks
the tape in reverse and writes gradients into the leaf tensors.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> backward(y, tape)
    >>> x.grad
    array([2., 4., 6.], dtype=float32)
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _scipy_erf

from .errors import DimensionError, NonFiniteError, UsageError

try:
    # libm erf through numba is ~10x faster than scipy's for float32
    import numba

    @numba.vectorize(["float32(float32)", "float64(float64)"], cache=True)
    def _erf(v):
        return math.erf(v)
except ImportError:  # pragma: no cover
    _erf = _scipy_erf

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "precision", "get_default_dtype",
    "set_default_dtype", "no_record", "apply_op",
    "add", "sub", "mul", "scale", "neg", "matmul", "softmax_lastdim", "gelu",
    "sigmoid", "relu", "leaky_relu", "abs_", "mean_over", "sum_all", "pad_zero",
    "pad_reflect", "slice_", "permute", "reshape", "concat", "roll", "take",
]

_state = threading.local()
_default_dtype = np.dtype(np.float32)
CHECK_FINITE = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """N-dimensional real array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self):
        return sum_all(self)

    def mean(self, dims=None, keepdims=False):
        return mean_over(self, dims, keepdims)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("out", "inputs", "vjp", "index")

    def __init__(self, out, inputs, vjp, index):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.index = index


class Tape:
    """Ordered record of differentiable ops executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        node = _Node(out, inputs, vjp, len(self.nodes))
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


def _stack() -> list:
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


@contextlib.contextmanager
def no_record():
    """Suspend recording; ops inside run as plain array computations."""
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _all_finite(a: np.ndarray) -> bool:
    # any NaN/Inf makes the dot product non-finite; far cheaper than isfinite().all()
    if a.flags.c_contiguous:
        flat = a.reshape(-1)
        if np.isfinite(np.dot(flat, flat)):
            return True
    return bool(np.isfinite(a).all())


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str = "op") -> Tensor:
    """Wrap an already computed array as the output of a differentiable op.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    if CHECK_FINITE and out_data.dtype.kind == "f" and not _all_finite(out_data):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def backward(output: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every grad-enabled leaf."""
    if output.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None:
        if output.requires_grad:
            output.grad = np.ones_like(output.data) if output.grad is None else output.grad + 1
        return
    if tape is None:
        tape = active_tape()
    if tape is None or output._node.index >= len(tape.nodes) or tape.nodes[output._node.index] is not output._node:
        raise UsageError("output was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: output._node.index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            src = t._node
            if src is not None and src.index >= node.index:
                raise RuntimeError("tape is not in topological order")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if src is None:
                    leaves[key] = t
    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
    if not retain:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(a.data * b.data, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return apply_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return apply_op(-x.data, (x,), lambda g: (-g,), "neg")


def abs_(x: Tensor) -> Tensor:
    return apply_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


_SQRT1_2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _SQRT1_2))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return apply_op((xd * cdf).astype(xd.dtype, copy=False), (x,), vjp, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return apply_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return apply_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


# --- reductions --------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return apply_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                    lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_over(x: Tensor, dims: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    if dims is None:
        dims = tuple(range(x.ndim))
    elif isinstance(dims, int):
        dims = (dims,)
    dims = tuple(d % x.ndim for d in dims)
    count = int(np.prod([x.shape[d] for d in dims])) if dims else 1
    if count == 0:
        raise DimensionError(f"mean over empty dims {dims} of shape {x.shape}")
    shape = x.shape
    out = x.data.mean(axis=dims, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, dims)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return apply_op(np.asarray(out, dtype=x.dtype), (x,), vjp, "mean")


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(a.data @ b.data, (a, b), vjp, "matmul")


def rowsum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis with keepdims, via BLAS (much faster than ``sum(-1)``
    for short rows)."""
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def colsum(a2: np.ndarray) -> np.ndarray:
    """Sum a 2-D array over its first axis."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a nonempty last dim, got shape {x.shape}")
    xd = x.data
    # subtract the max over each trailing matrix; rows far below it would
    # underflow, and those fall back to their own row max
    if xd.ndim >= 2:
        m = xd.max(axis=(-2, -1), keepdims=True)
    else:
        m = xd.max(keepdims=True)
    z = xd - m
    np.exp(z, out=z)
    s = rowsum(z)
    tiny = np.finfo(xd.dtype).tiny * 1e8
    low = s[..., 0] < tiny
    if low.any():
        rows = xd[low]
        zr = np.exp(rows - rows.max(axis=-1, keepdims=True))
        z[low] = zr
        s[low] = zr.sum(axis=-1, keepdims=True)
    z /= s

    def vjp(g):
        return (z * (g - rowsum(g * z)),)

    return apply_op(z, (x,), vjp, "softmax")


# --- shape manipulation ------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return apply_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(order)
    if sorted(order) != list(range(x.ndim)):
        raise DimensionError(f"permute order {order} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(order))
    return apply_op(np.ascontiguousarray(x.data.transpose(order)), (x,),
                    lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tensors, vjp, "concat")


def slice_(x: Tensor, index) -> Tensor:
    """Basic slicing (ints and slices); ``index`` is an index tuple."""
    if not isinstance(index, tuple):
        index = (index,)
    try:
        out = x.data[index]
    except IndexError as e:
        raise DimensionError(f"slice {index} of shape {x.shape}: {e}") from None
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op(np.ascontiguousarray(out), (x,), vjp, "slice")


def _pad_widths(x: Tensor, pads) -> list[tuple[int, int]]:
    if isinstance(pads, int):
        pads = [(pads, pads)] * x.ndim
    pads = [tuple(p) if not isinstance(p, int) else (p, p) for p in pads]
    if len(pads) != x.ndim or any(lo < 0 or hi < 0 for lo, hi in pads):
        raise DimensionError(f"padding {pads} invalid for shape {x.shape}")
    return pads


def pad_zero(x: Tensor, pads) -> Tensor:
    """Zero padding; ``pads`` is an int or one ``(before, after)`` pair per axis."""
    pads = _pad_widths(x, pads)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))
    return apply_op(np.pad(x.data, pads), (x,), lambda g: (np.ascontiguousarray(g[crop]),), "pad_zero")


def pad_reflect(x: Tensor, pads) -> Tensor:
    """Reflection padding (edge sample not repeated), as ``np.pad(mode="reflect")``."""
    pads = _pad_widths(x, pads)
    out = x.data
    index_maps = []
    for axis, (lo, hi) in enumerate(pads):
        if lo == 0 and hi == 0:
            continue
        idx = np.pad(np.arange(x.shape[axis]), (lo, hi), mode="reflect")
        index_maps.append((axis, idx, x.shape[axis]))
        out = np.take(out, idx, axis=axis)

    def vjp(g):
        for axis, idx, n in reversed(index_maps):
            moved = np.moveaxis(g, axis, 0)
            acc = np.zeros((n,) + moved.shape[1:], dtype=g.dtype)
            np.add.at(acc, idx, moved)
            g = np.moveaxis(acc, 0, axis)
        return (np.ascontiguousarray(g),)

    return apply_op(np.ascontiguousarray(out), (x,), vjp, "pad_reflect")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return apply_op(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[..., index]`` along the last axis of ``table``."""
    index = np.asarray(index)
    n = table.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise DimensionError(f"take: index out of range for table of size {n}")
    lead = table.shape[:-1]

    def vjp(g):
        g2 = g.reshape(int(np.prod(lead)), -1)
        flat = index.reshape(-1)
        out = np.stack([np.bincount(flat, weights=row, minlength=n) for row in g2])
        return (out.reshape(table.shape).astype(table.dtype),)

    return apply_op(table.data[..., index], (table,), vjp, "take")


# --- gradient checking -------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error of one component is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.  ``indices``
    restricts the probe to a subset of flat positions of ``x``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=_default_dtype)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    backward(y, tape)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    flat = base.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_record():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / (abs(ana) + abs(num) + 1e-12))
    return worst
