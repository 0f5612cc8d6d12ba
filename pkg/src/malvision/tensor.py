"""Dense tensors with a reverse-mode gradient tape.

The engine is deliberately small: a fixed set of primitives (matmul,
elementwise arithmetic, exp/log/tanh/sigmoid, maximum, reductions, cumsum,
shape ops, standardize, masked_softmax) with hand-written backward rules.
The network graph is static per configuration, so this is sufficient and
keeps every backward auditable.

Conventions:
  * float32 is the training precision; float64 exists for oracles and
    gradient checking.  Mixing dtypes in one operation is an error.
  * Operations executed under an active ``GradTape`` are recorded in
    execution order; ``GradTape.backward`` replays them in reverse and
    accumulates gradients additively into ``Tensor.grad``.
  * A tape is confined to one thread (thread-local active-tape stack);
    tensors themselves are immutable values once produced.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, MaskError, NumericsError

_FLOAT_DTYPES = (np.float32, np.float64)

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional array of float32 or float64 values.

    ``requires_grad`` marks trainable leaves; intermediate results become
    differentiable automatically when produced under a tape from at least
    one differentiable parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __float__(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Constant copy that never records onto a tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class GradTape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around the forward pass; ``backward`` replays
    the recorded operations in reverse order.  Gradients accumulate
    additively, so a parameter used several times receives the sum of all
    its contributions.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        self._nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every recorded parent."""
        if loss.data.size != 1:
            raise DimensionError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, parents, bwd in reversed(self._nodes):
            if out.grad is None:
                continue  # not on any path to the loss
            bwd(out.grad)

    def gradients(self, loss: Tensor, params: dict) -> dict:
        """Fresh gradients of ``loss`` w.r.t. ``params`` (name -> array)."""
        for out, parents, _ in self._nodes:
            out.grad = None
            for p in parents:
                p.grad = None
        for p in params.values():
            p.grad = None
        self.backward(loss)
        return {
            name: (p.grad.copy() if p.grad is not None
                   else np.zeros_like(p.data))
            for name, p in params.items()
        }


# -- plumbing ---------------------------------------------------------------


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise DimensionError(
            f"{op}: dtype mismatch {a.data.dtype.name} vs {b.data.dtype.name}")


def _emit(data: np.ndarray, parents: tuple, backward_builder) -> Tensor:
    """Create the result tensor, recording it if a tape is active."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, parents, backward_builder(out))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "add")
    data = a.data + b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        return run

    return _emit(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "sub")
    data = a.data - b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))
        return run

    return _emit(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "mul")
    data = a.data * b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        return run

    return _emit(data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "div")
    data = a.data / b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return run

    return _emit(data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g * p * a.data ** (p - 1.0))
        return run

    return _emit(data, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g * out.data)
        return run

    return _emit(data, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g / a.data)
        return run

    return _emit(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g * (1.0 - out.data * out.data))
        return run

    return _emit(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g * out.data * (1.0 - out.data))
        return run

    return _emit(data, (a,), bwd)


def logsigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), computed stably as -softplus(-x)."""
    x = a.data
    data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def bwd(out):
        def run(g):
            if a.requires_grad:
                # d/dx log sigmoid(x) = sigmoid(-x)
                s = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                             1.0 / (1.0 + np.exp(-np.abs(x))))
                _accum(a, g * s.astype(x.dtype))
        return run

    return _emit(data, (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g * np.sign(a.data))
        return run

    return _emit(data, (a,), bwd)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties route their gradient to the first argument."""
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "maximum")
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * take_a, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * (~take_a), b.shape))
        return run

    return _emit(data, (a, b), bwd)


def where(cond: np.ndarray, a: Tensor, b) -> Tensor:
    """Select from ``a`` where ``cond`` else ``b``; ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "where")
    data = np.where(cond, a.data, b.data)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * cond, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * (~cond), b.shape))
        return run

    return _emit(data, (a, b), bwd)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    data = a.data @ b.data

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))
        return run

    return _emit(data, (a, b), bwd)


# -- reductions ---------------------------------------------------------------


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _restore_axes(g, a.shape, axis, keepdims))
        return run

    return _emit(np.asarray(data, dtype=a.dtype), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _restore_axes(g, a.shape, axis, keepdims) / count)
        return run

    return _emit(np.asarray(data, dtype=a.dtype), (a,), bwd)


def cumsum(a: Tensor, axis: int) -> Tensor:
    data = np.cumsum(a.data, axis=axis)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
                _accum(a, rev)
        return run

    return _emit(data, (a,), bwd)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g.reshape(a.shape))
        return run

    return _emit(data, (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = a.data.swapaxes(ax1, ax2).copy()

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, g.swapaxes(ax1, ax2))
        return run

    return _emit(data, (a,), bwd)


def flip(a: Tensor, axis: int) -> Tensor:
    data = np.flip(a.data, axis=axis).copy()

    def bwd(out):
        def run(g):
            if a.requires_grad:
                _accum(a, np.flip(g, axis=axis))
        return run

    return _emit(data, (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=a.dtype)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[key] = g
                _accum(a, full)
        return run

    return _emit(data, (a,), bwd)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.take(a.data, idx, axis=axis)

    def bwd(out):
        def run(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                sel = [slice(None)] * a.ndim
                sel[axis] = idx
                np.add.at(full, tuple(sel), g)
                _accum(a, full)
        return run

    return _emit(data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(out):
        def run(g):
            offset = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    sel = [slice(None)] * g.ndim
                    sel[axis] = slice(offset, offset + s)
                    _accum(t, g[tuple(sel)])
                offset += s
        return run

    return _emit(data, tuple(tensors), bwd)


# -- normalization / attention -------------------------------------------------


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over the last axis (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (a.data - mu) * inv

    def bwd(out):
        def run(g):
            if a.requires_grad:
                n = a.shape[-1]
                gm = g.mean(axis=-1, keepdims=True)
                gy = (g * out.data).mean(axis=-1, keepdims=True)
                _accum(a, (g - gm - out.data * gy) * inv)
        return run

    return _emit(data.astype(a.dtype), (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain/bias must have shape {x.shape[-1:]}")
    return add(mul(standardize(x, eps), gain), bias)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax over the last axis under an additive {0, -inf} mask.

    Entries at -inf positions are exactly zero; every row must keep at
    least one attendable position.
    """
    m = mask.m if hasattr(mask, "m") else np.asarray(mask)
    m = m.astype(logits.dtype, copy=False)
    if np.isneginf(m).all(axis=-1).any():
        raise MaskError("masked_softmax: a row masks every position")
    shifted = logits.data + m
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    data = expd / expd.sum(axis=-1, keepdims=True)

    def bwd(out):
        def run(g):
            if logits.requires_grad:
                inner = (g * out.data).sum(axis=-1, keepdims=True)
                _accum(logits, out.data * (g - inner))
        return run

    return _emit(data.astype(logits.dtype), (logits,), bwd)


# -- helpers -------------------------------------------------------------------


def assert_finite(x, context: str) -> None:
    """Raise NumericsError if ``x`` contains NaN or Inf."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {context}")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, composed from primitives."""
    c = float(np.sqrt(2.0 / np.pi))
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), c)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


# -- binary tensor file format -------------------------------------------------

TENSOR_MAGIC = b"MALTNSR1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(fp, arr: np.ndarray) -> None:
    """Write one array in MALTNSR1 framing to an open binary file."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise DimensionError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DimensionError("tensor rank exceeds format limit")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fp.write(struct.pack("<I", extent))
    fp.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
    fp.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fp) -> np.ndarray:
    """Read one MALTNSR1-framed array from an open binary file."""
    magic = fp.read(8)
    if magic != TENSOR_MAGIC:
        raise DimensionError(f"bad tensor magic {magic!r}")
    rank = struct.unpack("<B", fp.read(1))[0]
    shape = tuple(struct.unpack("<I", fp.read(4))[0] for _ in range(rank))
    tag = struct.unpack("<B", fp.read(1))[0]
    if tag not in _DTYPE_TAGS:
        raise DimensionError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape)) if shape else 1
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DimensionError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)
