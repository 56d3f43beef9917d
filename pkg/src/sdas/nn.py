"""Module containers and the layers the operation catalog composes."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Registers Parameters, sub-Modules and numpy buffers assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        for store in (self._params, self._modules, self._buffers):
            store.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        for store in (self._params, self._modules, self._buffers):
            store.pop(name, None)
        object.__delattr__(self, name)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        object.__setattr__(self, name, value)
        self._buffers[name] = value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(targets) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in targets.items():
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleDict(Module):
    def __init__(self, items=None):
        super().__init__()
        for k, v in (items or {}).items():
            self[k] = v

    def __setitem__(self, key, module: Module) -> None:
        setattr(self, str(key), module)

    def __getitem__(self, key) -> Module:
        return self._modules[str(key)]

    def __delitem__(self, key) -> None:
        delattr(self, str(key))

    def __contains__(self, key) -> bool:
        return str(key) in self._modules

    def __len__(self) -> int:
        return len(self._modules)

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()

    def values(self):
        return self._modules.values()


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


# MAC counters take the input shape (without batch) and return (macs, out_shape).


def _out_shape(shape, stride, channels=None):
    c = shape[0] if channels is None else channels
    return (c,) + tuple(-(-n // s) for n, s in zip(shape[1:], stride))


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)

    def macs(self, shape):
        return 0, tuple(shape)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        dt = T.get_default_dtype()
        self.weight = Parameter(np.ones(channels), dtype=dt)
        self.bias = Parameter(np.zeros(channels), dtype=dt)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)

    def macs(self, shape):
        return int(np.prod(shape)), tuple(shape)


class Conv(Module):
    """Dense convolution without bias."""

    def __init__(self, c_in: int, c_out: int, kernel: tuple, stride: tuple, rng: np.random.Generator):
        super().__init__()
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        fan_in = c_in * int(np.prod(kernel))
        self.weight = Parameter(he_normal(rng, (c_out, c_in) + self.kernel, fan_in), dtype=T.get_default_dtype())

    def forward(self, x):
        return T.conv(x, self.weight, stride=self.stride)

    def macs(self, shape):
        out = _out_shape(shape, self.stride, self.weight.shape[0])
        return int(np.prod(out)) * shape[0] * int(np.prod(self.kernel)), out


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel: tuple, stride: tuple, dilation: tuple, rng: np.random.Generator):
        super().__init__()
        self.kernel, self.stride, self.dilation = tuple(kernel), tuple(stride), tuple(dilation)
        self.weight = Parameter(he_normal(rng, (channels,) + self.kernel, int(np.prod(kernel))),
                                dtype=T.get_default_dtype())

    def forward(self, x):
        return T.depthwise_conv(x, self.weight, stride=self.stride, dilation=self.dilation)

    def macs(self, shape):
        out = _out_shape(shape, self.stride)
        return int(np.prod(out)) * int(np.prod(self.kernel)), out


class PointwiseConv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: tuple | int = 1):
        super().__init__()
        self.stride = stride
        self.weight = Parameter(he_normal(rng, (c_out, c_in), c_in), dtype=T.get_default_dtype())

    def forward(self, x):
        return T.pointwise_conv(x, self.weight, stride=self.stride)

    def macs(self, shape):
        stride = self.stride if isinstance(self.stride, tuple) else (self.stride,) * (len(shape) - 1)
        out = _out_shape(shape, stride, self.weight.shape[0])
        return int(np.prod(out)) * shape[0], out


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        super().__init__()
        dt = T.get_default_dtype()
        if zero:
            w = np.zeros((c_out, c_in))
        else:
            bound = 1.0 / math.sqrt(c_in)
            w = rng.uniform(-bound, bound, (c_out, c_in))
        self.weight = Parameter(w, dtype=dt)
        self.bias = Parameter(np.zeros(c_out), dtype=dt)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def macs(self, shape):
        return shape[0] * self.weight.shape[0], (self.weight.shape[0],)


class ReLUConvBN(Module):
    """ReLU -> strided 1x1 projection -> BN; used for cell inputs and strided identity."""

    def __init__(self, c_in: int, c_out: int, stride: tuple, rng: np.random.Generator):
        super().__init__()
        self.relu = ReLU()
        self.conv = PointwiseConv(c_in, c_out, rng, stride=tuple(stride))
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return self.bn(self.conv(self.relu(x)))

    def macs(self, shape):
        m1, s = self.conv.macs(shape)
        m2, s = self.bn.macs(s)
        return m1 + m2, s
