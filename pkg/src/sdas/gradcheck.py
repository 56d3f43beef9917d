"""Finite-difference checks of every catalog operation and of the mixed edge."""

from __future__ import annotations

import numpy as np

from .cell import Edge, mixed_edge_forward
from .ops import OP_SETS, VIDEO_ONLY_SETS, build_operation, make_spec
from .tensor import GradCheckReport, Parameter, Tensor, gradient_check, no_grad, precision


def _input(rng, channels: int, video: bool, spatial: int, frames: int) -> Tensor:
    shape = (2, channels) + ((frames,) if video else ()) + (spatial, spatial)
    return Tensor(rng.standard_normal(shape), name="x")


def _jitter(params: dict, rng) -> None:
    # zero-initialised layers would make some checks trivially exact
    for p in params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)


def check_operation(op_id: str, video: bool = False, channels: int = 2, seed: int = 0, tol: float = 1e-5,
                    spatial: int = 3, frames: int = 3) -> GradCheckReport:
    """Gradient of one operation w.r.t. its input and every weight, in double precision."""
    with precision("double"):
        rng = np.random.default_rng(seed)
        op = build_operation(make_spec(op_id, video), channels, seed)
        params = dict(op.named_parameters())
        _jitter(params, rng)
        x = _input(rng, channels, video, spatial, frames)
        return gradient_check(lambda x, *_: op(x), {"x": x, **params}, tol=tol, seed=seed)


class _Frozen:
    """Stands in for an operation whose output does not depend on the perturbed weights."""

    def __init__(self, out: np.ndarray):
        self.out = out

    def __call__(self, x):
        return Tensor(self.out)


def check_mixed_edge(op_set: str, channels: int = 2, seed: int = 0, tol: float = 1e-5, spatial: int = 3,
                     frames: int = 2, ops=None) -> GradCheckReport:
    """Gradient of a relaxed edge w.r.t. x, alpha, beta and every candidate's weights.

    x, alpha and beta are checked through the full mixture.  The weights of
    candidate o only reach the output through o, so they are checked with
    the other candidates' outputs held at their (exact) current values.
    """
    video = op_set in VIDEO_ONLY_SETS
    with precision("double"):
        rng = np.random.default_rng(seed)
        cands = tuple(ops or OP_SETS[op_set])
        edge = Edge(0, 2, cands, alpha=Parameter(rng.standard_normal(len(cands))),
                    beta=Parameter(rng.standard_normal(1)))
        instances = {o: build_operation(make_spec(o, video), channels, int(rng.integers(2**31)))
                     for o in cands}
        for inst in instances.values():
            _jitter(dict(inst.named_parameters()), rng)
        x = _input(rng, channels, video, spatial, frames)
        report = gradient_check(lambda x, *_: mixed_edge_forward(edge, instances, x),
                                {"x": x, "alpha": edge.alpha, "beta": edge.beta}, tol=tol, seed=seed)
        errors, nonfinite = dict(report.errors), list(report.nonfinite)
        with no_grad():
            outs = {o: instances[o](x).data for o in cands}
        for o in cands:
            params = {f"{o}.{n}": p for n, p in instances[o].named_parameters()}
            if not params:
                continue
            mixed = {c: (instances[c] if c == o else _Frozen(outs[c])) for c in cands}
            sub = gradient_check(lambda *_: mixed_edge_forward(edge, mixed, x), params, tol=tol, seed=seed)
            errors.update(sub.errors)
            nonfinite += sub.nonfinite
        return GradCheckReport(errors=errors, tol=tol, nonfinite=nonfinite)


def check_op_set(op_set: str, channels: int = 2, seed: int = 0, tol: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    video = op_set in VIDEO_ONLY_SETS
    return [(op, check_operation(op, video, channels, seed, tol)) for op in OP_SETS[op_set]]
