"""Momentum SGD for operation weights and Adam for architecture parameters.

Both keep their state keyed by parameter name so that parameters dropped by
discretization can be forgotten and the state can be checkpointed.
"""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(eta1: float, t: int, T: int) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return eta1 * 0.5 * (1 + math.cos(math.pi * t / T))


class _Optimizer:
    def __init__(self, params: dict):
        self.params = dict(params)

    def sync(self, params: dict) -> None:
        """Track a new parameter set, dropping state for parameters that disappeared."""
        self.params = dict(params)
        for store in self._stores():
            for name in list(store):
                if name not in self.params:
                    del store[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _stores(self):
        return ()


class SGD(_Optimizer):
    """buf = momentum * buf + (g + wd * w);  w -= lr * buf."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def _stores(self):
        return (self.buffers,)

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = np.array(g, dtype=p.dtype, copy=True)
            else:
                buf *= self.momentum
                buf += g
            p.data -= lr * buf

    def state_dict(self) -> dict:
        return {f"buf/{k}": v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict) -> None:
        self.buffers = {k[4:]: np.array(v) for k, v in state.items() if k.startswith("buf/")}


class Adam(_Optimizer):
    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _stores(self):
        return (self.m, self.v)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1 - b1**self.steps
        c2 = 1 - b2**self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {f"m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        out["steps"] = np.array(self.steps)
        return out

    def load_state_dict(self, state: dict) -> None:
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}
        self.steps = int(state["steps"])
