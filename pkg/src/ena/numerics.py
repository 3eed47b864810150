"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when a
:class:`GradTape` is active and an input requires gradients, records a closure
that maps the output cotangent to input cotangents. :func:`backward` replays the
tape in reverse recording order, which is a valid reverse topological order
because an op can only consume tensors that already exist.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "GradTape",
    "NumericError",
    "ShapeError",
    "DegenerateRowError",
    "ProbeError",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "finite_diff_errors",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "track_memory",
]


class NumericError(ArithmeticError):
    """A primitive produced non-finite values."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ProbeError(NumericError):
    """A finite-difference probe evaluated to a non-finite value."""


_DEFAULT_DTYPE = np.dtype(np.float64)
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


# ---------------------------------------------------------------------------
# payload accounting


@dataclass
class MemoryStats:
    live_bytes: int = 0
    peak_bytes: int = 0
    allocated_bytes: int = 0


_MEM_STACK: list[MemoryStats] = []


@contextlib.contextmanager
def track_memory():
    """Count tensor payload bytes created while the block runs.

    ``peak_bytes`` is the high-water mark of payload held by live tensors that
    were created inside the block.
    """
    stats = MemoryStats()
    _MEM_STACK.append(stats)
    try:
        yield stats
    finally:
        _MEM_STACK.remove(stats)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_mem")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        if _MEM_STACK:
            nbytes = arr.nbytes
            for stats in _MEM_STACK:
                stats.live_bytes += nbytes
                stats.allocated_bytes += nbytes
                if stats.live_bytes > stats.peak_bytes:
                    stats.peak_bytes = stats.live_bytes
            self._mem = (tuple(_MEM_STACK), nbytes)
        else:
            self._mem = None

    def __del__(self):
        mem = getattr(self, "_mem", None)
        if mem:
            for stats in mem[0]:
                stats.live_bytes -= mem[1]

    # -- metadata
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Python/numpy constants adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# tape


class _Op:
    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name, inputs, output, vjp):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradTape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; tapes nest per thread and are never shared
    between concurrent forward passes.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()
        self.visited = 0

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            self._add_leaf(t)

    def _add_leaf(self, t: Tensor) -> None:
        key = id(t)
        if key not in self._leaf_ids and key not in self._produced:
            self._leaf_ids.add(key)
            self.leaves.append(t)

    def _record(self, op: _Op) -> None:
        for t in op.inputs:
            if t.requires_grad:
                self._add_leaf(t)
        self.ops.append(op)
        self._produced.add(id(op.output))

    def gradient(self, output: Tensor, sources: Sequence[Tensor] | None = None):
        grads = backward(output, self)
        if sources is None:
            return grads
        return [grads[s] if s in grads else np.zeros_like(s.data) for s in sources]


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


CHECK_FINITE = True


def _make(name: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if CHECK_FINITE and out.dtype.kind == "f" and not np.isfinite(out).all():
        raise NumericError(f"{name} produced non-finite values")
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                result.requires_grad = True
                tape._record(_Op(name, inputs, result, vjp))
                break
    return result


def backward(output: Tensor, tape: GradTape) -> dict:
    """Gradients of a scalar ``output`` with respect to every leaf on ``tape``.

    Returns a dict keyed by leaf tensor; leaves the output does not depend on
    get exact zeros. Each leaf's ``grad`` attribute is set as a side effect.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any recorded leaf")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    visited = 0
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        visited += 1
        for t, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    tape.visited = visited
    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make("pow", out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make("silu", out, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    half = t + 1.0
    half *= 0.5
    out = x * half

    def vjp(g):
        # d/dx = half + 0.5 x (1 - t^2) C (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= x
        d *= 0.5 * _GELU_C
        d *= 1.0 - t * t
        d += half
        d *= g
        return (d,)

    return _make("gelu", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and layout


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make("mean", np.asarray(out), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.ascontiguousarray(out) if basic else out, (a,), vjp)


def permute(a, perm, axis: int) -> Tensor:
    """Gather ``a`` along ``axis`` with a bijective index; ``out[i] = a[perm[i]]``."""
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.shape[axis],):
        raise ShapeError(f"permutation of length {perm.shape} does not match axis of size {a.shape[axis]}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return _make("permute", np.take(a.data, perm, axis=axis), (a,),
                 lambda g: (np.take(g, inv, axis=axis),))


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an arbitrary (possibly repeating) integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        # g has index dims in place of `axis`; bring them to the front and
        # scatter-add rows through a sparse incidence matrix.
        nidx = indices.ndim
        g_moved = np.moveaxis(g, tuple(range(axis, axis + nidx)), tuple(range(nidx)))
        rows = g_moved.reshape(indices.size, -1)
        n = a.shape[axis]
        inc = sparse.csr_matrix((np.ones(indices.size, dtype=g.dtype), (indices.ravel(), np.arange(indices.size))),
                                shape=(n, indices.size))
        summed = np.asarray(inc @ rows).reshape((n,) + g_moved.shape[nidx:])
        return (np.moveaxis(summed, 0, axis),)

    return _make("take", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make("stack", out, ts, vjp)


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make("pad", out, (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    with np.errstate(over="ignore", invalid="ignore"):
        if flat:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            try:
                out = a.data @ b.data
            except ValueError as exc:
                raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def solve(a, b) -> Tensor:
    """Batched ``a^{-1} b`` for square ``a``."""
    a, b = _pair(a, b)
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"solve needs square a matching b: {a.shape}, {b.shape}")
    x = np.linalg.solve(a.data, b.data)

    def vjp(g):
        gb = np.linalg.solve(np.swapaxes(a.data, -1, -2), g)
        ga = -gb @ np.swapaxes(x, -1, -2) if a.requires_grad else None
        return (_unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if b.requires_grad else None)

    return _make("solve", x, (a, b), vjp)


def inverse(a) -> Tensor:
    """Batched matrix inverse."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"inverse needs square matrices, got {a.shape}")
    x = np.linalg.inv(a.data)
    xt = np.swapaxes(x, -1, -2)
    return _make("inverse", x, (a,), lambda g: (-(xt @ g @ xt),))


def unit_lower_inverse(a) -> Tensor:
    """Inverse of ``I + tril(a, -1)`` by row-wise forward substitution.

    Only the strictly lower triangle of ``a`` is read; the diagonal is taken as
    one. Much cheaper than a general LU inverse for the small batched systems of
    the chunked delta rule.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"unit_lower_inverse needs square matrices, got {a.shape}")
    n = a.shape[-1]
    x = np.zeros_like(a.data)
    idx = np.arange(n)
    x[..., idx, idx] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n):
            x[..., i:i + 1, :i] = -(a.data[..., i:i + 1, :i] @ x[..., :i, :i])
    xt = np.swapaxes(x, -1, -2)
    lower = np.tril(np.ones((n, n), dtype=bool), -1)
    return _make("unit_lower_inverse", x, (a,), lambda g: (np.where(lower, -(xt @ g @ xt), 0.0),))


# ---------------------------------------------------------------------------
# fused layers


def masked_row_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``.

    Masked-out entries are exactly zero. The row maximum is taken over unmasked
    entries only. ``mask=None`` is the plain softmax and follows the same
    arithmetic as an all-true mask.
    """
    scores = as_tensor(scores)
    s = scores.data
    if mask is None:
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, s.shape)
        except ValueError as exc:
            raise ShapeError(f"mask {mask.shape} does not broadcast to scores {s.shape}") from exc
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no unmasked entry")
        m = np.where(mask, s, -np.inf).max(axis=-1, keepdims=True)
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.where(mask, np.exp(s - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("masked_row_softmax", p, (scores,), vjp)


def softmax(scores) -> Tensor:
    return masked_row_softmax(scores, None)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain = _pair(x, gain)
    bias = as_tensor(bias)
    if gain.shape[-1:] != x.shape[-1:] or bias.shape[-1:] != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, C]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make("cross_entropy", np.asarray(loss), (logits,), vjp)


def linear_scan(gate, inputs, initial=None) -> Tensor:
    """First-order recurrence ``h_t = gate_t * h_{t-1} + inputs_t`` along axis -2."""
    gate, inputs = _pair(gate, inputs)
    if gate.shape != inputs.shape:
        raise ShapeError(f"linear_scan gate {gate.shape} and inputs {inputs.shape} differ")
    a, u = gate.data, inputs.data
    length = a.shape[-2]
    h = np.empty_like(u)
    prev = np.zeros_like(u[..., 0, :]) if initial is None else np.asarray(initial, dtype=u.dtype)
    for t in range(length):
        prev = a[..., t, :] * prev + u[..., t, :]
        h[..., t, :] = prev
    h0 = np.zeros_like(u[..., 0, :]) if initial is None else np.asarray(initial, dtype=u.dtype)

    def vjp(g):
        lam = np.empty_like(g)
        carry = np.zeros_like(g[..., 0, :])
        for t in range(length - 1, -1, -1):
            carry = g[..., t, :] + carry
            lam[..., t, :] = carry
            carry = carry * a[..., t, :]
        h_prev = np.concatenate([h0[..., None, :], h[..., :-1, :]], axis=-2)
        return (lam * h_prev if gate.requires_grad else None,
                lam if inputs.requires_grad else None)

    return _make("linear_scan", h, (gate, inputs), vjp)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_errors(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5,
                       max_coords: int | None = None, seed: int = 0) -> list[float]:
    """Per-input max relative error between tape gradients and central differences.

    ``f`` receives one tensor per input and must return a scalar tensor. With
    ``max_coords`` set, a seeded random subset of coordinates is probed per input.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64, copy=True) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        tape.watch(*leaves)
        out = f(*leaves)
    grads = backward(out, tape)
    rng = np.random.default_rng(seed)
    errors = []
    for i, arr in enumerate(arrays):
        analytic = grads[leaves[i]]
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        flat = arr.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = _probe(f, arrays)
            flat[c] = orig - h
            fm = _probe(f, arrays)
            flat[c] = orig
            central = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[c]
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
        errors.append(float(worst))
    return errors


def _probe(f, arrays) -> float:
    try:
        value = float(f(*[Tensor(a) for a in arrays]).item())
    except NumericError as exc:
        raise ProbeError(f"function is non-finite at a perturbed point: {exc}") from exc
    if not np.isfinite(value):
        raise ProbeError("function is non-finite at a perturbed point")
    return value


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error over all probed coordinates of all inputs."""
    return max(finite_diff_errors(f, inputs, h, max_coords, seed), default=0.0)
