"""Candidate operations for the three search spaces.

Convolutional operations follow ReLU -> Conv -> BN.  A separable convolution
is a depthwise conv followed by a pointwise conv, applied twice with the
stride in the first application; the dilated variant (rate 2) is applied
once.  Op ids are the stable strings written into genotype files.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import BatchNorm, DepthwiseConv, Linear, Module, PointwiseConv, ReLU, ReLUConvBN
from .tensor import ShapeError

OP_SETS = {
    "o2d": (
        "identity", "avg_pool_3x3", "max_pool_3x3", "sep_conv_3x3",
        "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
    ),
    "o3d": (
        "identity", "max_pool_3x3", "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3",
        "max_pool_3x3x3", "sep_conv_3d_3x3x3", "sep_conv_3d_3x5x5", "dil_conv_3d_3x3x3",
    ),
    "oadv": (
        "identity", "max_pool_3x3", "sep_conv_3x3", "sep_conv_5x5", "max_pool_3x3x3",
        "sep_conv_3d_3x3x3", "sep_conv_3d_3x5x5", "channel_scale", "channel_bias",
    ),
}

VIDEO_ONLY_SETS = {"o3d", "oadv"}

# op_id -> (kind, k_s, k_t, dilation)
_OP_TABLE = {
    "identity": ("identity", 1, 1, 1),
    "avg_pool_3x3": ("avg_pool", 3, 1, 1),
    "max_pool_3x3": ("max_pool", 3, 1, 1),
    "sep_conv_3x3": ("sep_conv", 3, 1, 1),
    "sep_conv_5x5": ("sep_conv", 5, 1, 1),
    "dil_conv_3x3": ("dil_conv", 3, 1, 2),
    "dil_conv_5x5": ("dil_conv", 5, 1, 2),
    "max_pool_3x3x3": ("max_pool", 3, 3, 1),
    "sep_conv_3d_3x3x3": ("sep_conv_3d", 3, 3, 1),
    "sep_conv_3d_3x5x5": ("sep_conv_3d", 5, 3, 1),
    "dil_conv_3d_3x3x3": ("dil_conv_3d", 3, 3, 2),
    "channel_scale": ("channel_scale", 1, 1, 1),
    "channel_bias": ("channel_bias", 1, 1, 1),
}

CHANNELWISE = {"channel_scale", "channel_bias"}


@dataclass(frozen=True)
class OperationSpec:
    op_id: str
    kind: str
    spatial: int
    temporal: int = 1
    dilation: int = 1
    video: bool = False
    stride: tuple | None = None

    @property
    def ndim(self) -> int:
        return 3 if self.video else 2

    @property
    def kernel(self) -> tuple:
        k = (self.spatial, self.spatial)
        return (self.temporal,) + k if self.video else k

    @property
    def dilations(self) -> tuple:
        d = (self.dilation, self.dilation)
        if not self.video:
            return d
        return (self.dilation if self.temporal > 1 else 1,) + d

    @property
    def strides(self) -> tuple:
        return self.stride if self.stride is not None else (1,) * self.ndim

    @property
    def is_strided(self) -> bool:
        return any(s > 1 for s in self.strides)

    @property
    def channelwise(self) -> bool:
        return self.kind in CHANNELWISE

    def with_stride(self, stride) -> "OperationSpec":
        stride = tuple(int(s) for s in stride)
        if len(stride) != self.ndim:
            raise ValueError(f"{self.op_id}: stride {stride} for a {self.ndim}-axis op")
        if any(s <= 0 for s in stride):
            raise ValueError(f"{self.op_id}: non-positive stride {stride}")
        return replace(self, stride=None if all(s == 1 for s in stride) else stride)


def make_spec(op_id: str, video: bool = False) -> OperationSpec:
    try:
        kind, ks, kt, dil = _OP_TABLE[op_id]
    except KeyError:
        raise ValueError(f"unknown op id {op_id!r}") from None
    if kt > 1 and not video:
        raise ValueError(f"{op_id} needs a temporal axis")
    return OperationSpec(op_id, kind, ks, kt, dil, video)


def catalog(set_id: str, video: bool = False) -> list[OperationSpec]:
    """The declared operation list for ``set_id`` in stable order."""
    key = set_id.lower()
    if key not in OP_SETS:
        raise ValueError(f"unknown op set {set_id!r}; expected one of {sorted(OP_SETS)}")
    if key in VIDEO_ONLY_SETS and not video:
        raise ValueError(f"op set {set_id} is defined for video input only")
    return [make_spec(op, video) for op in OP_SETS[key]]


def param_count(spec: OperationSpec, channels: int) -> int:
    c = channels
    k = int(np.prod(spec.kernel))
    if spec.kind == "identity":
        return c * c + 2 * c if spec.is_strided else 0
    if spec.kind in ("max_pool", "avg_pool"):
        return 0
    if spec.kind in ("sep_conv", "dil_conv"):
        reps = 2 if spec.kind == "sep_conv" else 1
        return reps * (k * c + c * c + 2 * c)
    if spec.kind in ("sep_conv_3d", "dil_conv_3d"):
        reps = 2 if spec.kind == "sep_conv_3d" else 1
        return reps * (spec.spatial ** 2 * c + spec.temporal * c + c * c + 2 * c)
    if spec.channelwise:
        return c * c + c
    raise ValueError(f"no parameter rule for {spec.kind}")


class OperationInstance(Module):
    """A built candidate operation with C input and C output channels."""

    spec: OperationSpec

    def param_count(self) -> int:
        return param_count(self.spec, self.channels)

    def _check_rank(self, x):
        if x.ndim != self.spec.ndim + 2:
            layout = "NCTHW" if self.spec.video else "NCHW"
            raise ShapeError(self.spec.op_id, f"expects {layout} input, got shape {x.shape}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.spec.op_id}, C={self.channels}, stride={self.spec.strides})"


class Identity(OperationInstance):
    def __init__(self, spec, channels, rng):
        super().__init__()
        self.spec, self.channels = spec, channels
        self.proj = ReLUConvBN(channels, channels, spec.strides, rng) if spec.is_strided else None

    def forward(self, x):
        self._check_rank(x)
        return x if self.proj is None else self.proj(x)

    def macs(self, shape):
        return (0, tuple(shape)) if self.proj is None else self.proj.macs(shape)


class Pool(OperationInstance):
    def __init__(self, spec, channels, rng=None):
        super().__init__()
        self.spec, self.channels = spec, channels

    def forward(self, x):
        self._check_rank(x)
        fn = T.max_pool if self.spec.kind == "max_pool" else T.avg_pool
        return fn(x, self.spec.kernel, self.spec.strides)

    def macs(self, shape):
        out = (shape[0],) + tuple(-(-n // s) for n, s in zip(shape[1:], self.spec.strides))
        return int(np.prod(out)) * int(np.prod(self.spec.kernel)), out


class _SepApplication(Module):
    """ReLU -> depthwise -> pointwise -> BN."""

    def __init__(self, channels, kernel, stride, dilation, rng):
        super().__init__()
        self.relu = ReLU()
        self.dw = DepthwiseConv(channels, kernel, stride, dilation, rng)
        self.pw = PointwiseConv(channels, channels, rng)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        return self.bn(self.pw(self.dw(self.relu(x))))

    def macs(self, shape):
        total = 0
        for layer in (self.dw, self.pw, self.bn):
            m, shape = layer.macs(shape)
            total += m
        return total, shape


class _Sep3dApplication(Module):
    """ReLU -> (1 x k x k depthwise + k_t x 1 x 1 depthwise) -> pointwise -> BN."""

    def __init__(self, channels, k_s, k_t, stride, dilation, rng):
        super().__init__()
        self.relu = ReLU()
        self.dw_spatial = DepthwiseConv(channels, (1, k_s, k_s), stride, (1, dilation, dilation), rng)
        self.dw_temporal = DepthwiseConv(channels, (k_t, 1, 1), stride, (dilation, 1, 1), rng)
        self.pw = PointwiseConv(channels, channels, rng)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        h = self.relu(x)
        h = T.add(self.dw_spatial(h), self.dw_temporal(h))
        return self.bn(self.pw(h))

    def macs(self, shape):
        m1, out = self.dw_spatial.macs(shape)
        m2, _ = self.dw_temporal.macs(shape)
        m3, out2 = self.pw.macs(out)
        m4, out2 = self.bn.macs(out2)
        return m1 + m2 + int(np.prod(out)) + m3 + m4, out2


class SepConv(OperationInstance):
    def __init__(self, spec, channels, rng):
        super().__init__()
        self.spec, self.channels = spec, channels
        ones = (1,) * spec.ndim
        if spec.kind == "sep_conv":
            self.app0 = _SepApplication(channels, spec.kernel, spec.strides, spec.dilations, rng)
            self.app1 = _SepApplication(channels, spec.kernel, ones, spec.dilations, rng)
        elif spec.kind == "dil_conv":
            self.app0 = _SepApplication(channels, spec.kernel, spec.strides, spec.dilations, rng)
        elif spec.kind == "sep_conv_3d":
            self.app0 = _Sep3dApplication(channels, spec.spatial, spec.temporal, spec.strides, spec.dilation, rng)
            self.app1 = _Sep3dApplication(channels, spec.spatial, spec.temporal, ones, spec.dilation, rng)
        else:
            self.app0 = _Sep3dApplication(channels, spec.spatial, spec.temporal, spec.strides, spec.dilation, rng)

    def forward(self, x):
        self._check_rank(x)
        for app in self._modules.values():
            x = app(x)
        return x

    def macs(self, shape):
        total = 0
        for app in self._modules.values():
            m, shape = app.macs(shape)
            total += m
        return total, shape


class ChannelWise(OperationInstance):
    """Global-average-pool -> C x C linear -> (sigmoid, multiply) or (add)."""

    def __init__(self, spec, channels, rng=None):
        super().__init__()
        self.spec, self.channels = spec, channels
        self.fc = Linear(channels, channels, zero=True)

    def forward(self, x):
        self._check_rank(x)
        z = self.fc(T.global_avg_pool(x))
        if self.spec.kind == "channel_scale":
            return T.channel_mul(x, T.sigmoid(z))
        return T.channel_add(x, z)

    def macs(self, shape):
        spatial = int(np.prod(shape))
        return spatial + self.channels * self.channels + spatial, tuple(shape)


def build_separable3d(spec: OperationSpec, channels: int, seed: int) -> SepConv:
    if spec.kind not in ("sep_conv_3d", "dil_conv_3d"):
        raise ValueError(f"{spec.op_id} is not a separable-3d convolution")
    if not spec.video:
        raise ValueError(f"{spec.op_id} needs a temporal axis")
    return SepConv(spec, channels, np.random.default_rng(seed))


def build_channelwise(kind: str, channels: int, seed: int, video: bool = True, stride=None) -> ChannelWise:
    if kind not in ("scale", "bias"):
        raise ValueError(f"channel-wise kind must be 'scale' or 'bias', got {kind!r}")
    spec = make_spec(f"channel_{kind}", video)
    if stride is not None and any(int(s) != 1 for s in np.atleast_1d(stride)):
        raise ValueError("channel-wise operations are shape-preserving; stride must be 1")
    return ChannelWise(spec, channels)


def build_operation(spec: OperationSpec, channels: int, seed: int) -> OperationInstance:
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if spec.op_id not in _OP_TABLE:
        raise ValueError(f"unknown op id {spec.op_id!r}")
    rng = np.random.default_rng(seed)
    if spec.kind == "identity":
        return Identity(spec, channels, rng)
    if spec.kind in ("max_pool", "avg_pool"):
        return Pool(spec, channels)
    if spec.kind in ("sep_conv", "dil_conv"):
        return SepConv(spec, channels, rng)
    if spec.kind in ("sep_conv_3d", "dil_conv_3d"):
        return build_separable3d(spec, channels, seed)
    if spec.channelwise:
        if spec.is_strided:
            raise ValueError(f"{spec.op_id} cannot carry stride {spec.strides}")
        return build_channelwise(spec.kind.split("_")[1], channels, seed, spec.video)
    raise ValueError(f"unknown op kind {spec.kind!r}")
