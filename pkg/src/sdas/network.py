"""Scalable networks assembled from stems and a stack of cells.

Layout: stem, then for every reduction stage K normal cells followed by the
reduction-type cell, then K more normal cells, global average pooling and a
linear classifier.  Node channels start at C2 / n_int (so the first cell
emits C2 channels) and double at every reduction-type cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cell import CELL_STRIDES, Genotype
from .nn import BatchNorm, Conv, Linear, Module, ModuleDict, ReLU, ReLUConvBN, Sequential
from .ops import build_operation, make_spec, param_count
from .tensor import ShapeError, Tensor, no_grad

TARGETS = ("image-lowres", "image-highres", "video")

DEFAULT_REDUCTIONS = {
    "image-lowres": ("reduction", "reduction"),
    "image-highres": ("reduction", "reduction"),
    "video": ("st_reduction", "st_reduction", "s_reduction"),
}


class MaxPoolLayer(Module):
    def __init__(self, kernel, stride):
        super().__init__()
        self.kernel, self.stride = tuple(kernel), tuple(stride)

    def forward(self, x):
        return T.max_pool(x, self.kernel, self.stride)

    def macs(self, shape):
        out = (shape[0],) + tuple(-(-n // s) for n, s in zip(shape[1:], self.stride))
        return int(np.prod(out)) * int(np.prod(self.kernel)), out


class Stem(Sequential):
    def macs(self, shape):
        total = 0
        for layer in self:
            m, shape = layer.macs(shape)
            total += m
        return total, shape


@dataclass
class StemConfig:
    target: str = "image-lowres"
    stride: tuple | None = None
    pool: bool | None = None

    def resolved(self) -> tuple[tuple, bool]:
        if self.target == "video":
            stride = tuple(self.stride) if self.stride is not None else (1, 2, 2)
            pool = True if self.pool is None else bool(self.pool)
        elif self.target == "image-highres":
            stride = tuple(self.stride) if self.stride is not None else (2, 2)
            pool = False if self.pool is None else bool(self.pool)
        else:
            stride = tuple(self.stride) if self.stride is not None else (1, 1)
            pool = False if self.pool is None else bool(self.pool)
        return stride, pool


def build_stem(cfg: StemConfig, in_channels: int, c1: int, rng) -> Stem:
    stride, pool = cfg.resolved()
    if cfg.target == "image-highres":
        half = max(c1 // 2, 1)
        layers = [Conv(in_channels, half, (3, 3), stride, rng), BatchNorm(half), ReLU(),
                  Conv(half, c1, (3, 3), stride, rng), BatchNorm(c1)]
    else:
        kernel = (1, 3, 3) if cfg.target == "video" else (3, 3)
        layers = [Conv(in_channels, c1, kernel, stride, rng), BatchNorm(c1)]
    if pool:
        kernel = (1, 3, 3) if cfg.target == "video" else (3, 3)
        layers.append(MaxPoolLayer(kernel, stride))
    return Stem(*layers)


def stem_param_count(cfg: StemConfig, in_channels: int, c1: int) -> int:
    if cfg.target == "image-highres":
        half = max(c1 // 2, 1)
        return in_channels * half * 9 + 2 * half + half * c1 * 9 + 2 * c1
    return in_channels * c1 * 9 + 2 * c1


def cell_layout(K: int, reductions) -> list[str]:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    out = []
    for r in reductions:
        if CELL_STRIDES.get(r) is None:
            raise ValueError(f"{r!r} is not a reduction cell type")
        out += ["normal"] * K + [r]
    return out + ["normal"] * K


def node_channels(C2: int, n_int: int) -> int:
    if C2 % n_int:
        raise ValueError(f"C2={C2} must be divisible by n_int={n_int} (C2 is the first cell's output width)")
    return C2 // n_int


def stack_channels(layout, C1: int, C2: int, n_int: int):
    """Yield (cell_type, c_pp, c_p, c, prev_stride) for each cell and finally the output width."""
    c = node_channels(C2, n_int)
    c_pp = c_p = C1
    prev_stride = None
    rows = []
    for ct in layout:
        if CELL_STRIDES[ct] is not None:
            c *= 2
        rows.append((ct, c_pp, c_p, c, prev_stride))
        prev_stride = CELL_STRIDES[ct]
        c_pp, c_p = c_p, n_int * c
    return rows, c_p


class Classifier(Module):
    def __init__(self, channels: int, num_classes: int, rng):
        super().__init__()
        self.fc = Linear(channels, num_classes, rng)

    def forward(self, x):
        return self.fc(T.global_avg_pool(x))

    def macs(self, shape):
        return int(np.prod(shape)) + shape[0] * self.fc.weight.shape[0], (self.fc.weight.shape[0],)


class Network(Module):
    """stem -> cells -> classifier; each cell reads the outputs of the two cells before it."""

    def __init__(self, stem: Module, cells: list, classifier: Module):
        super().__init__()
        self.stem = stem
        self.cells = ModuleDict({f"cell{i}": c for i, c in enumerate(cells)})
        self.classifier = classifier

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for cell in self.cells.values():
            s0, s1 = s1, cell(s0, s1)
        return self.classifier(s1)

    def macs(self, input_shape) -> int:
        """Analytic multiply-add count of one forward pass for a single sample."""
        total, s = self.stem.macs(tuple(input_shape))
        s0 = s1 = s
        for cell in self.cells.values():
            m, out = cell.macs(s0, s1)
            total += m
            s0, s1 = s1, out
        return total + self.classifier.macs(s1)[0]


class DiscreteCell(Module):
    """A cell whose nodes are plain sums over their retained (source, op) pairs."""

    def __init__(self, nodes, cell_type: str, video: bool, c_pp: int, c_p: int, c: int,
                 prev_stride, rng, ops=None, pre=None):
        super().__init__()
        self.nodes = [list(pairs) for pairs in nodes]
        self.cell_type = cell_type
        ones = (1,) * (3 if video else 2)
        if pre is None:
            self.pre0 = ReLUConvBN(c_pp, c, prev_stride or ones, rng)
            self.pre1 = ReLUConvBN(c_p, c, ones, rng)
        else:
            self.pre0, self.pre1 = pre
        self.ops = ModuleDict()
        stride = CELL_STRIDES[cell_type]
        for idx, pairs in enumerate(self.nodes):
            for src, op in pairs:
                key = f"{src}_{idx + 2}"
                if ops is not None:
                    self.ops[key] = ops[key]
                    continue
                spec = make_spec(op, video)
                if stride is not None and src < 2:
                    spec = spec.with_stride(stride)
                self.ops[key] = build_operation(spec, c, int(rng.integers(2**63)))

    @classmethod
    def from_search_cell(cls, cell, nodes) -> "DiscreteCell":
        ops = {}
        for idx, pairs in enumerate(nodes):
            for src, op in pairs:
                key = f"{src}_{idx + 2}"
                ops[key] = cell.edge_ops[key][op]
        g = cell.graph
        return cls(nodes, g.cell_type, g.video, 0, 0, cell.channels, None, None, ops=ops,
                   pre=(cell.pre0, cell.pre1))

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        s0, s1 = self.pre0(s0), self.pre1(s1)
        if s0.shape != s1.shape:
            raise ShapeError("cell", f"preprocessed inputs differ: {s0.shape} vs {s1.shape}")
        states = [s0, s1]
        for idx, pairs in enumerate(self.nodes):
            states.append(T.add_n([self.ops[f"{src}_{idx + 2}"](states[src]) for src, _ in pairs]))
        return T.concat(states[2:], axis=1)

    def macs(self, shape_pp, shape_p):
        m0, s0 = self.pre0.macs(shape_pp)
        m1, s1 = self.pre1.macs(shape_p)
        total = m0 + m1
        shapes = {0: s0, 1: s1}
        for idx, pairs in enumerate(self.nodes):
            out = None
            for src, _ in pairs:
                m, out = self.ops[f"{src}_{idx + 2}"].macs(shapes[src])
                total += m
            total += (len(pairs) - 1) * int(np.prod(out))
            shapes[idx + 2] = out
        return total, (shapes[2][0] * len(self.nodes),) + tuple(shapes[2][1:])


@dataclass
class NetworkPlan:
    genotype: Genotype
    target: str = "image-lowres"
    K: int = 2
    C1: int = 48
    C2: int = 64
    num_classes: int = 10
    in_channels: int = 3
    reductions: tuple | None = None
    stem: StemConfig = field(default_factory=StemConfig)

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        self.stem = StemConfig(self.target, self.stem.stride, self.stem.pool)
        if self.reductions is None:
            self.reductions = DEFAULT_REDUCTIONS[self.target]
        self.reductions = tuple(self.reductions)

    @property
    def video(self) -> bool:
        return self.target == "video"

    @property
    def layout(self) -> list[str]:
        return cell_layout(self.K, self.reductions)

    def check_genotype(self) -> None:
        need = set(self.layout)
        missing = need - set(self.genotype.cells)
        if missing:
            raise ValueError(f"genotype lacks cell types {sorted(missing)} required by the plan")
        if bool(self.genotype.meta.get("video", False)) != self.video:
            raise ValueError(f"genotype video={self.genotype.meta.get('video', False)} does not fit target {self.target}")


def build_network(plan: NetworkPlan, seed: int = 0) -> Network:
    """Materialize ``plan`` with fresh weights drawn from ``seed``."""
    plan.check_genotype()
    rng = np.random.default_rng(seed)
    n_int = plan.genotype.meta["n_int"]
    stem = build_stem(plan.stem, plan.in_channels, plan.C1, rng)
    rows, c_out = stack_channels(plan.layout, plan.C1, plan.C2, n_int)
    cells = [DiscreteCell(plan.genotype.cells[ct]["nodes"], ct, plan.video, c_pp, c_p, c, prev, rng)
             for ct, c_pp, c_p, c, prev in rows]
    return Network(stem, cells, Classifier(c_out, plan.num_classes, rng))


def count_params(plan: NetworkPlan) -> int:
    """Learnable scalars of ``build_network(plan)``, computed without building it."""
    plan.check_genotype()
    n_int = plan.genotype.meta["n_int"]
    total = stem_param_count(plan.stem, plan.in_channels, plan.C1)
    rows, c_out = stack_channels(plan.layout, plan.C1, plan.C2, n_int)
    for ct, c_pp, c_p, c, _ in rows:
        total += c_pp * c + 2 * c + c_p * c + 2 * c
        stride = CELL_STRIDES[ct]
        for idx, pairs in enumerate(plan.genotype.cells[ct]["nodes"]):
            for src, op in pairs:
                spec = make_spec(op, plan.video)
                if stride is not None and src < 2:
                    spec = spec.with_stride(stride)
                total += param_count(spec, c)
    return total + c_out * plan.num_classes + plan.num_classes


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------


class Diverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def predict_logits(model: Module, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    dt = model.parameters()[0].dtype
    out = []
    with no_grad():
        for b in range(0, len(x), batch_size):
            out.append(model(Tensor(x[b:b + batch_size], dtype=dt)).data)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_accuracy(model: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    logits = predict_logits(model, x, batch_size)
    return float((logits.argmax(axis=1) == y).mean())


def train_eval(model: Module, dataset, epochs: int, batch_size: int = 64, lr: float = 0.025,
               momentum: float = 0.9, weight_decay: float = 3e-4, seed: int = 0,
               augment=None, eval_split: str = "test") -> dict:
    """Supervised training with momentum SGD and cosine decay; returns held-out metrics.

    ``augment``, when given, maps (sample, rng) to a training sample.
    """
    from .optim import SGD, cosine_lr

    x_tr, y_tr = dataset.subset("train")
    x_ev, y_ev = dataset.subset(eval_split)
    params = dict(model.named_parameters())
    opt = SGD(params, momentum=momentum, weight_decay=weight_decay)
    dt = next(iter(params.values())).dtype
    steps = -(-len(y_tr) // batch_size)
    total = epochs * steps
    losses = []
    t = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(y_tr))
        model.train()
        running = []
        for b in range(steps):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb = x_tr[idx]
            if augment is not None:
                xb = np.stack([augment(s, rng) for s in xb])
            opt.zero_grad()
            loss = T.cross_entropy(model(Tensor(xb, dtype=dt)), y_tr[idx])
            if not np.isfinite(loss.data):
                raise Diverged(f"non-finite training loss at epoch {epoch}, batch {b}",
                               {"epoch": epoch, "batch": b, "loss": float(loss.data)})
            T.backward(loss)
            opt.step(cosine_lr(lr, t, total))
            running.append(float(loss.data))
            t += 1
        losses.append(float(np.mean(running)))
    acc = evaluate_accuracy(model, x_ev, y_ev, batch_size)
    return {"accuracy": acc, "top1_error": 1.0 - acc, "train_losses": losses, "epochs": epochs}
