"""Dense numpy tensors with a reverse-mode gradient tape.

Every differentiable primitive used by the operation catalog lives here.
Spatial primitives are rank-generic: images are NCHW, clips are NCTHW, and
kernels/strides/dilations carry one entry per spatial axis.  All strided
primitives use "same" padding, so an axis of extent ``n`` with stride ``s``
maps to ``ceil(n / s)``.
"""

from __future__ import annotations

import contextlib
import functools
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

_PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """A primitive received operands whose shapes it cannot combine."""

    def __init__(self, primitive: str, message: str, axes: Sequence[int] = ()):
        self.primitive = primitive
        self.axes = tuple(axes)
        where = f" (axes {list(self.axes)})" if self.axes else ""
        super().__init__(f"{primitive}: {message}{where}")


# ---------------------------------------------------------------------------
# tape and global state (thread-confined)
# ---------------------------------------------------------------------------


@dataclass
class Record:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


@dataclass
class Tape:
    """Primitive applications in creation order, which is a topological order."""

    records: list = field(default_factory=list)

    def append(self, record: Record) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(_PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; use 'single' or 'double'") from None
    return np.dtype(precision)


def get_default_dtype() -> np.dtype:
    return np.dtype(_state.dtype)


def set_default_dtype(precision) -> None:
    _state.dtype = resolve_dtype(precision).type


@contextlib.contextmanager
def precision(p):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _state.dtype
    set_default_dtype(p)
    try:
        yield
    finally:
        _state.dtype = prev


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dt = resolve_dtype(dtype) if dtype is not None else get_default_dtype()
        self.data = np.array(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(Tensor)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype), False)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: mixed precisions {sorted(map(str, dtypes))} in one graph")
    req = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        _state.tape.append(Record(op, inputs, out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        tape.clear()
        raise ValueError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
            else:
                t.grad += gi
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        n = max(a.ndim, b.ndim)
        sa = (1,) * (n - a.ndim) + a.shape
        sb = (1,) * (n - b.ndim) + b.shape
        bad = [i for i in range(n) if sa[i] != sb[i] and 1 not in (sa[i], sb[i])]
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}", bad) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def softmax(v: Tensor) -> Tensor:
    if v.ndim != 1:
        raise ShapeError("softmax", f"expects a vector, got shape {v.shape}")
    e = np.exp(v.data - v.data.max())
    s = e / e.sum()

    def bw(g):
        return (s * (g - np.dot(g, s)),)

    return _emit("softmax", s, (v,), bw)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.broadcast_to(g / n, x.shape),)

    return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """sum_i weights[i] * xs[i], accumulated in index order."""
    if weights.ndim != 1 or weights.shape[0] != len(xs):
        raise ShapeError("weighted_sum", f"{len(xs)} operands but weights of shape {weights.shape}")
    shape = xs[0].shape
    for i, x in enumerate(xs):
        if x.shape != shape:
            raise ShapeError("weighted_sum", f"operand {i} has shape {x.shape}, expected {shape}",
                             [a for a in range(len(shape)) if a >= x.ndim or x.shape[a] != shape[a]])
    w = weights.data
    acc = w[0] * xs[0].data
    for i in range(1, len(xs)):
        acc = acc + w[i] * xs[i].data

    def bw(g):
        gw = np.array([np.vdot(g, x.data) for x in xs], dtype=weights.dtype)
        return (gw, *[w[i] * g for i in range(len(xs))])

    return _emit("weighted_sum", acc, (weights, *xs), bw)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = xs[0].shape
    for x in xs[1:]:
        bad = [a for a in range(len(ref)) if a != axis and x.shape[a] != ref[a]]
        if x.ndim != len(ref) or bad:
            raise ShapeError("concat", f"{x.shape} does not match {ref} off the concat axis", bad)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


# ---------------------------------------------------------------------------
# spatial helpers
# ---------------------------------------------------------------------------


def _tuple(v, n: int, what: str, op: str) -> tuple:
    t = tuple(int(a) for a in v) if isinstance(v, (tuple, list)) else (int(v),) * n
    if len(t) != n:
        raise ShapeError(op, f"{what} has {len(t)} entries for {n} spatial axes")
    return t


def same_padding(sizes, kernel, stride, dilation):
    """Output extents and (before, after) pads for "same" padding."""
    outs, pads = [], []
    for n, k, s, d in zip(sizes, kernel, stride, dilation):
        o = -(-n // s)
        total = max((o - 1) * s + (k - 1) * d + 1 - n, 0)
        outs.append(o)
        pads.append((total // 2, total - total // 2))
    return tuple(outs), pads


def _spatial_args(op: str, x: Tensor, kernel, stride, dilation):
    nsp = x.ndim - 2
    if nsp < 1:
        raise ShapeError(op, f"needs a batch, channel and at least one spatial axis; got {x.shape}")
    kernel = _tuple(kernel, nsp, "kernel", op)
    stride = _tuple(stride, nsp, "stride", op)
    dilation = _tuple(dilation, nsp, "dilation", op)
    if any(s <= 0 for s in stride):
        raise ValueError(f"{op}: stride must be positive, got {stride}")
    if any(d <= 0 for d in dilation):
        raise ValueError(f"{op}: dilation must be positive, got {dilation}")
    if any(k <= 0 for k in kernel):
        raise ValueError(f"{op}: kernel must be positive, got {kernel}")
    out, pads = same_padding(x.shape[2:], kernel, stride, dilation)
    return kernel, stride, dilation, out, pads


@functools.lru_cache(maxsize=4096)
def _taps(kernel, dilation, stride, out):
    """(flat index, slice tuple) for every kernel tap over the padded input."""
    taps = []
    for idx, off in enumerate(itertools.product(*(range(k) for k in kernel))):
        sl = tuple(slice(o * d, o * d + (n - 1) * s + 1, s) for o, d, s, n in zip(off, dilation, stride, out))
        taps.append((idx, (slice(None), slice(None)) + sl))
    return tuple(taps)


def _pad(a: np.ndarray, pads, value=0.0) -> np.ndarray:
    if not any(p for pair in pads for p in pair):
        return a
    shape = a.shape[:2] + tuple(n + b + e for n, (b, e) in zip(a.shape[2:], pads))
    out = np.full(shape, value, dtype=a.dtype)
    out[(slice(None), slice(None)) + tuple(slice(b, b + n) for n, (b, _) in zip(a.shape[2:], pads))] = a
    return out


def _crop(a: np.ndarray, pads, sizes) -> np.ndarray:
    sl = (slice(None), slice(None)) + tuple(slice(b, b + n) for (b, _), n in zip(pads, sizes))
    return a[sl]


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv(x: Tensor, w: Tensor, stride=1, dilation=1) -> Tensor:
    """Dense convolution; ``w`` has shape (C_out, C_in, *kernel)."""
    if w.ndim != x.ndim:
        raise ShapeError("conv", f"weight rank {w.ndim} does not match input rank {x.ndim}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError("conv", f"weight expects {w.shape[1]} input channels, input has {x.shape[1]}", [1])
    kernel, stride, dilation, out, pads = _spatial_args("conv", x, w.shape[2:], stride, dilation)
    n, ci = x.shape[:2]
    co = w.shape[0]
    kk = int(np.prod(kernel))
    p = int(np.prod(out))
    xp = _pad(x.data, pads)
    taps = _taps(kernel, dilation, stride, tuple(out))
    cols = np.empty((n, ci, kk, p), dtype=x.dtype)
    for idx, sl in taps:
        cols[:, :, idx, :] = xp[sl].reshape(n, ci, p)
    cols = cols.reshape(n, ci * kk, p)
    w2 = w.data.reshape(co, ci * kk)
    y = np.matmul(w2, cols).reshape((n, co) + out)

    def bw(g):
        g2 = g.reshape(n, co, p)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape((n, ci, kk) + out)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for idx, sl in taps:
                gxp[sl] += gcols[:, :, idx]
            gx = _crop(gxp, pads, x.shape[2:])
        return gx, gw

    return _emit("conv", y, (x, w), bw)


def depthwise_conv(x: Tensor, w: Tensor, stride=1, dilation=1) -> Tensor:
    """Per-channel convolution; ``w`` has shape (C, *kernel)."""
    if w.ndim != x.ndim - 1 or w.shape[0] != x.shape[1]:
        raise ShapeError("depthwise_conv", f"weight {w.shape} does not fit input {x.shape}", [1])
    kernel, stride, dilation, out, pads = _spatial_args("depthwise_conv", x, w.shape[1:], stride, dilation)
    c = x.shape[1]
    nsp = x.ndim - 2
    xp = _pad(x.data, pads)
    wflat = w.data.reshape(c, -1)
    bshape = (1, c) + (1,) * nsp
    taps = _taps(kernel, dilation, stride, tuple(out))
    y = np.zeros((x.shape[0], c) + out, dtype=x.dtype)
    for idx, sl in taps:
        y += xp[sl] * wflat[:, idx].reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gw = np.empty_like(wflat) if w.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=x.dtype) if x.requires_grad else None
        for idx, sl in taps:
            if gw is not None:
                gw[:, idx] = (g * xp[sl]).sum(axis=red)
            if gxp is not None:
                gxp[sl] += g * wflat[:, idx].reshape(bshape)
        gx = _crop(gxp, pads, x.shape[2:]) if gxp is not None else None
        return gx, (gw.reshape(w.shape) if gw is not None else None)

    return _emit("depthwise_conv", y, (x, w), bw)


def pointwise_conv(x: Tensor, w: Tensor, stride=1) -> Tensor:
    """1x1(x1) convolution; ``w`` has shape (C_out, C_in)."""
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError("pointwise_conv", f"weight {w.shape} does not fit input {x.shape}", [1])
    nsp = x.ndim - 2
    stride = _tuple(stride, nsp, "stride", "pointwise_conv")
    if any(s <= 0 for s in stride):
        raise ValueError(f"pointwise_conv: stride must be positive, got {stride}")
    sub = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    xs = x.data[sub] if any(s > 1 for s in stride) else x.data
    n, ci = xs.shape[:2]
    out = xs.shape[2:]
    x2 = xs.reshape(n, ci, -1)
    y = np.matmul(w.data, x2).reshape((n, w.shape[0]) + out)

    def bw(g):
        g2 = g.reshape(n, w.shape[0], -1)
        gw = np.tensordot(g2, x2, axes=([0, 2], [0, 2])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxs = np.matmul(w.data.T, g2).reshape(xs.shape)
            if xs is x.data:
                gx = gxs
            else:
                gx = np.zeros(x.shape, dtype=x.dtype)
                gx[sub] = gxs
        return gx, gw

    return _emit("pointwise_conv", y, (x, w), bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def max_pool(x: Tensor, kernel, stride=1) -> Tensor:
    """Max pooling; ties route the gradient to the first maximal tap."""
    kernel, stride, dilation, out, pads = _spatial_args("max_pool", x, kernel, stride, 1)
    xp = _pad(x.data, pads, value=-np.inf)
    taps = _taps(kernel, dilation, stride, tuple(out))
    stack = np.stack([xp[sl] for _, sl in taps])
    arg = stack.argmax(axis=0)
    y = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for idx, sl in taps:
            gxp[sl] += np.where(arg == idx, g, 0)
        return (_crop(gxp, pads, x.shape[2:]),)

    return _emit("max_pool", y, (x,), bw)


def avg_pool(x: Tensor, kernel, stride=1) -> Tensor:
    """Average pooling; zero padding counts toward the window size."""
    kernel, stride, dilation, out, pads = _spatial_args("avg_pool", x, kernel, stride, 1)
    xp = _pad(x.data, pads)
    taps = _taps(kernel, dilation, stride, tuple(out))
    kk = len(taps)
    y = np.zeros((x.shape[0], x.shape[1]) + out, dtype=x.dtype)
    for _, sl in taps:
        y += xp[sl]
    y /= kk

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        gk = g / kk
        for _, sl in taps:
            gxp[sl] += gk
        return (_crop(gxp, pads, x.shape[2:]),)

    return _emit("avg_pool", y, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, *S) -> (N, C)."""
    axes = tuple(range(2, x.ndim))
    m = int(np.prod(x.shape[2:]))

    def bw(g):
        return (np.broadcast_to((g / m).reshape(g.shape + (1,) * len(axes)), x.shape),)

    return _emit("global_avg_pool", x.data.mean(axis=axes), (x,), bw)


def _channel_operand(op: str, x: Tensor, s: Tensor) -> tuple:
    if s.shape != x.shape[:2]:
        raise ShapeError(op, f"per-channel operand {s.shape} does not match {x.shape[:2]}", [0, 1])
    return s.shape + (1,) * (x.ndim - 2)


def channel_mul(x: Tensor, s: Tensor) -> Tensor:
    """x[n, c, ...] * s[n, c]."""
    bshape = _channel_operand("channel_mul", x, s)
    sb = s.data.reshape(bshape)
    axes = tuple(range(2, x.ndim))

    def bw(g):
        return g * sb, (g * x.data).sum(axis=axes)

    return _emit("channel_mul", x.data * sb, (x, s), bw)


def channel_add(x: Tensor, b: Tensor) -> Tensor:
    """x[n, c, ...] + b[n, c]."""
    bshape = _channel_operand("channel_add", x, b)
    axes = tuple(range(2, x.ndim))

    def bw(g):
        return g, g.sum(axis=axes)

    return _emit("channel_add", x.data + b.data.reshape(bshape), (x, b), bw)


# ---------------------------------------------------------------------------
# normalization, dense layers, loss
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel affine batch norm.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``momentum * old + (1 - momentum) * batch``
    (unbiased batch variance).  In eval mode the running buffers are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", f"affine terms {gamma.shape}/{beta.shape} for {c} channels", [1])
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    if training:
        if m < 2:
            raise ShapeError("batch_norm", "training mode needs more than one value per channel", axes)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (invstd.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _emit("batch_norm", y, (x, gamma, beta), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError("linear", f"weight {w.shape} does not fit input {x.shape}", [1])
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        out = (g @ w.data, g.T @ x.data)
        return out if b is None else out + (g.sum(axis=0),)

    return _emit("linear", y, inputs, bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}", [0])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _emit("cross_entropy", loss, (logits,), bw)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of equally shaped tensors."""
    acc = xs[0]
    for x in xs[1:]:
        if x.shape != acc.shape:
            raise ShapeError("add", f"{x.shape} vs {acc.shape}",
                             [a for a in range(min(x.ndim, acc.ndim)) if x.shape[a] != acc.shape[a]])
        acc = add(acc, x)
    return acc


PRIMITIVES: dict[str, Callable] = {
    "conv": conv,
    "depthwise_conv": depthwise_conv,
    "pointwise_conv": pointwise_conv,
    "batch_norm": batch_norm,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "max_pool": max_pool,
    "avg_pool": avg_pool,
    "global_avg_pool": global_avg_pool,
    "channel_mul": channel_mul,
    "channel_add": channel_add,
    "add": add,
    "mul": mul,
    "weighted_sum": weighted_sum,
    "concat": concat,
    "linear": linear,
    "cross_entropy": cross_entropy,
    "sum": sum_all,
    "mean": mean_all,
    "reshape": reshape,
}


def primitive_forward(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tol: float
    nonfinite: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and all(e <= self.tol for e in self.errors.values())


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return reshape(out, ())
    return sum_all(mul(out, Tensor._wrap(projection, False)))


def _probe(flat: np.ndarray, i: int, h: float, value: Callable) -> tuple[float, float]:
    orig = flat[i]
    flat[i] = orig + h
    fp = value()
    flat[i] = orig - h
    fm = value()
    flat[i] = orig
    return fp, fm


def gradient_check(f: Callable, inputs: Sequence[Tensor] | dict, eps: float = 1e-5, tol: float = 1e-6,
                   seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    Non-scalar outputs are contracted with a fixed random projection.  Error
    per input is max |analytic - numeric| / max(1, |numeric|).  Inputs are
    perturbed in place and restored.
    """
    if isinstance(inputs, dict):
        names, tensors = list(inputs), list(inputs.values())
    else:
        tensors = list(inputs)
        names = [t.name or f"input{i}" for i, t in enumerate(tensors)]
    if any(t.dtype != np.float64 for t in tensors):
        raise TypeError("gradient_check requires double precision inputs")
    if sum(t.size for t in tensors) > 10_000:
        raise ValueError("gradient_check is limited to 10^4 scalars")

    with no_grad():
        probe = f(*tensors)
    projection = None
    if probe.size != 1:
        projection = np.random.default_rng(seed).standard_normal(probe.shape)

    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        current_tape().clear()
        loss = _scalarize(f(*tensors), projection)
        backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]
    finally:
        for t, fl in zip(tensors, flags):
            t.requires_grad = fl

    def value() -> float:
        with no_grad():
            return float(_scalarize(f(*tensors), projection).data)

    errors, nonfinite = {}, []
    for name, t, a in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            ai = a.reshape(-1)[i]
            h = eps
            while True:
                fp, fm = _probe(flat, i, h, value)
                num = (fp - fm) / (2 * h)
                err = abs(ai - num) / max(1.0, abs(num))
                if err <= tol or h <= eps * 1e-3:
                    break
                # a probe straddling a ReLU/max kink shows unequal one-sided slopes; retry with a smaller step
                f0 = value()
                if abs((fp - f0) - (f0 - fm)) / h <= 1e-3 * max(1.0, abs(num)):
                    break
                h /= 10
            if not (math.isfinite(num) and math.isfinite(ai)):
                nonfinite.append(name)
                break
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors=errors, tol=tol, nonfinite=nonfinite)
