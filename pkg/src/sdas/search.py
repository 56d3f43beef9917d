"""Alternating first-order bilevel search with scheduled discretization.

Each iteration takes one momentum-SGD step on operation weights (training
half, architecture frozen), one Adam step on (alpha, beta) (validation half,
weights frozen), then lets the scheduler perform whatever one-step
discretizations the schedule has made due.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cell import CELL_ORDER, CellGraph, Genotype, SearchCell, extract_genotype
from .data import split_half
from .network import (DEFAULT_REDUCTIONS, TARGETS, Classifier, DiscreteCell, Network, StemConfig,
                      build_stem, cell_layout, stack_channels)
from .ops import OP_SETS, VIDEO_ONLY_SETS
from .optim import SGD, Adam, cosine_lr
from .schedule import (SCHEDULES, DiscretizationLog, Schedule, count_reachable, discretize_all,
                       replay, schedule_value, step, total_steps)
from .tensor import Tensor

MODES = ("sdas", "das")
METRIC_FIELDS = ("iteration", "epoch", "train_loss", "val_loss", "lr", "M_t", "reachable_count",
                 "forward_macs")


@dataclass
class SearchConfig:
    op_set: str = "o2d"
    ops: tuple | None = None
    n_int: int = 4
    k: int = 2
    K: int = 2
    C1: int | None = None
    C2: int = 64
    batch_size: int = 64
    epochs: int = 50
    eta1: float = 0.025
    eta2: float = 3e-4
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    adam_betas: tuple = (0.5, 0.999)
    schedule: str = "C"
    mode: str = "sdas"
    seed: int = 0
    dataset: str = "synthetic-image"
    precision: str = "single"
    target: str = "image-lowres"
    reductions: tuple | None = None
    stem_stride: tuple | None = None
    stem_pool: bool | None = None

    def __post_init__(self):
        self.op_set = self.op_set.lower()
        self.schedule = self.schedule.upper()
        self.mode = self.mode.lower()
        if self.op_set not in OP_SETS:
            raise ValueError(f"op_set must be one of {sorted(OP_SETS)}, got {self.op_set!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.op_set in VIDEO_ONLY_SETS and not self.video:
            raise ValueError(f"op set {self.op_set} needs the video target")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.C1 is None:
            self.C1 = 16 if self.video else 48
        if self.reductions is None:
            self.reductions = DEFAULT_REDUCTIONS[self.target]
        self.reductions = tuple(self.reductions)
        self.ops = tuple(self.ops) if self.ops is not None else None
        self.adam_betas = tuple(self.adam_betas)
        self.stem_stride = tuple(self.stem_stride) if self.stem_stride is not None else None

    @property
    def video(self) -> bool:
        return self.target == "video"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


class SearchDiverged(RuntimeError):
    """Non-finite loss during search; ``snapshot`` holds the state at failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def build_graphs(cfg: SearchConfig) -> dict[str, CellGraph]:
    types = set(cell_layout(cfg.K, cfg.reductions))
    return {ct: CellGraph(ct, cfg.op_set, cfg.video, cfg.n_int, cfg.k, cfg.ops)
            for ct in CELL_ORDER if ct in types}


class SearchNetwork(Network):
    """Over-parameterized network; all repeats of a cell type share one CellGraph."""

    def __init__(self, cfg: SearchConfig, num_classes: int, in_channels: int = 3):
        with T.precision(cfg.precision):
            rng = np.random.default_rng(cfg.seed)
            graphs = build_graphs(cfg)
            stem = build_stem(StemConfig(cfg.target, cfg.stem_stride, cfg.stem_pool), in_channels,
                              cfg.C1, rng)
            rows, c_out = stack_channels(cell_layout(cfg.K, cfg.reductions), cfg.C1, cfg.C2, cfg.n_int)
            cells = [SearchCell(graphs[ct], c_pp, c_p, c, prev, rng) for ct, c_pp, c_p, c, prev in rows]
            super().__init__(stem, cells, Classifier(c_out, num_classes, rng))
        self.graphs = graphs
        self.config = cfg

    def weight_parameters(self) -> dict:
        return dict(self.named_parameters())

    def arch_parameters(self) -> dict:
        out = {}
        for g in self.graphs.values():
            out.update(g.arch_parameters("arch."))
        return out

    def genotype(self) -> Genotype:
        return extract_genotype(self.graphs)

    def to_discrete(self, genotype: Genotype | None = None) -> Network:
        """Discrete network that reuses this network's stem, surviving ops and classifier."""
        genotype = genotype or self.genotype()
        cells = [DiscreteCell.from_search_cell(c, genotype.cells[c.graph.cell_type]["nodes"])
                 for c in self.cells.values()]
        return Network(self.stem, cells, self.classifier)


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def _loss(net, batch, dtype):
    x, y = batch
    return T.cross_entropy(net(Tensor(x, dtype=dtype)), y)


def bilevel_step(net: SearchNetwork, train_batch, val_batch, opt_w: SGD, opt_a: Adam,
                 lr_t: float) -> tuple[float, float]:
    """One weight step on ``train_batch`` then one architecture step on ``val_batch``."""
    weights = net.weight_parameters()
    arch = net.arch_parameters()
    dtype = next(iter(weights.values())).dtype
    net.train()

    _set_trainable(arch.values(), False)
    try:
        opt_w.zero_grad()
        loss = _loss(net, train_batch, dtype)
        if not np.isfinite(loss.data):
            raise SearchDiverged("non-finite training loss", {"train_loss": float(loss.data)})
        T.backward(loss)
        opt_w.step(lr_t)
    finally:
        _set_trainable(arch.values(), True)
    train_loss = float(loss.data)

    if not arch:
        with T.no_grad():
            return train_loss, float(_loss(net, val_batch, dtype).data)
    _set_trainable(weights.values(), False)
    try:
        opt_a.zero_grad()
        vloss = _loss(net, val_batch, dtype)
        if not np.isfinite(vloss.data):
            raise SearchDiverged("non-finite validation loss",
                                 {"train_loss": train_loss, "val_loss": float(vloss.data)})
        T.backward(vloss)
        opt_a.step()
    finally:
        _set_trainable(weights.values(), True)
    return train_loss, float(vloss.data)


@dataclass
class SearchResult:
    config: SearchConfig
    network: SearchNetwork
    log: DiscretizationLog
    metrics: list
    T: int
    t: int
    genotype: Genotype | None = None
    epoch_losses: list = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.t >= self.T


def epoch_losses(metrics) -> list[dict]:
    out = {}
    for row in metrics:
        out.setdefault(row["epoch"], []).append(row)
    return [{"epoch": e, "train_loss": float(np.mean([r["train_loss"] for r in rows])),
             "val_loss": float(np.mean([r["val_loss"] for r in rows]))} for e, rows in sorted(out.items())]


class _Run:
    """Mutable search state: everything a checkpoint has to capture."""

    def __init__(self, cfg: SearchConfig, dataset):
        self.cfg = cfg
        train = dataset.splits["train"]
        self.train_idx, self.val_idx = split_half(train, cfg.seed)
        assert not set(self.train_idx.tolist()) & set(self.val_idx.tolist())
        if len(self.val_idx) == 0:
            raise ValueError("training split too small to halve")
        self.x, self.y = dataset.x, dataset.y
        self.steps = math.ceil(len(self.train_idx) / cfg.batch_size)
        self.T = cfg.epochs * self.steps
        self.net = SearchNetwork(cfg, dataset.num_classes, dataset.x.shape[1])
        self.sched = Schedule(cfg.schedule, total_steps(self.net.graphs), self.T)
        self.opt_w = SGD(self.net.weight_parameters(), cfg.momentum, cfg.weight_decay_w)
        self.opt_a = Adam(self.net.arch_parameters(), cfg.eta2, cfg.adam_betas)
        self.log = DiscretizationLog(initial_count=count_reachable(self.net.graphs))
        self.metrics: list[dict] = []
        self.t = 0
        self.meta = {"num_classes": dataset.num_classes, "in_channels": int(dataset.x.shape[1]),
                     "sample_shape": list(dataset.x.shape[1:]), "dataset": dict(dataset.meta)}

    def batches(self, t: int):
        """Index arrays of the training and validation batches used at iteration t (1-based)."""
        epoch, b = divmod(t - 1, self.steps)
        bs = self.cfg.batch_size
        tr = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(self.train_idx)
        va = np.random.default_rng([self.cfg.seed, 2, epoch]).permutation(self.val_idx)
        tr_b = tr[b * bs:(b + 1) * bs]
        va_b = va[np.arange(b * bs, b * bs + len(tr_b)) % len(va)]
        return epoch, tr_b, va_b

    def iterate(self, t: int) -> dict:
        epoch, tr_b, va_b = self.batches(t)
        lr = cosine_lr(self.cfg.eta1, t - 1, self.T)
        macs = self.net.macs(self.x.shape[1:])
        try:
            tl, vl = bilevel_step(self.net, (self.x[tr_b], self.y[tr_b]), (self.x[va_b], self.y[va_b]),
                                  self.opt_w, self.opt_a, lr)
        except SearchDiverged as exc:
            exc.snapshot.update({"iteration": t, "lr": lr, "log": self.log.to_text(),
                                 "arch": {k: v.data.tolist() for k, v in self.net.arch_parameters().items()}})
            raise
        before = len(self.log)
        if self.cfg.mode == "sdas":
            step(self.net.graphs, self.sched, t, self.log)
        elif t == self.T:
            discretize_all(self.net.graphs, t, self.log)
        if len(self.log) != before:
            self.opt_w.sync(self.net.weight_parameters())
            self.opt_a.sync(self.net.arch_parameters())
        self.t = t
        row = {"iteration": t, "epoch": epoch, "train_loss": tl, "val_loss": vl, "lr": lr,
               "M_t": len(self.log), "reachable_count": count_reachable(self.net.graphs),
               "forward_macs": macs}
        self.metrics.append(row)
        return row

    # checkpointing

    def save(self, path) -> None:
        arrays = {f"net/{k}": v for k, v in self.net.state_dict().items()}
        arrays.update({f"arch/{k}": p.data.copy() for k, p in self.net.arch_parameters().items()})
        arrays.update({f"optw/{k}": v for k, v in self.opt_w.state_dict().items()})
        arrays.update({f"opta/{k}": v for k, v in self.opt_a.state_dict().items()})
        meta = {"config": self.cfg.to_dict(), "t": self.t, "T": self.T, "log": self.log.to_text(),
                "metrics": self.metrics, **self.meta}
        arrays["meta"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def restore(self, ckpt: dict) -> None:
        meta = ckpt["meta"]
        if meta["T"] != self.T:
            raise ValueError(f"checkpoint was taken with T={meta['T']}, this run has T={self.T}")
        self.log = DiscretizationLog.from_text(meta["log"])
        replay(self.log, self.net.graphs)
        arrays = ckpt["arrays"]
        self.net.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
        for name, p in self.net.arch_parameters().items():
            p.data[...] = arrays[f"arch/{name}"]
        self.opt_w.sync(self.net.weight_parameters())
        self.opt_a.sync(self.net.arch_parameters())
        self.opt_w.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("optw/")})
        self.opt_a.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("opta/")})
        self.metrics = list(meta["metrics"])
        self.t = meta["t"]


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("meta")))
    return {"meta": meta, "arrays": arrays}


def graphs_from_checkpoint(path) -> dict[str, CellGraph]:
    """Architecture state recorded in a checkpoint (no weights are built)."""
    meta = load_checkpoint(path)["meta"]
    graphs = build_graphs(SearchConfig.from_dict(meta["config"]))
    replay(DiscretizationLog.from_text(meta["log"]), graphs)
    return graphs


def run_search(cfg: SearchConfig, dataset, resume_from=None, stop_after: int | None = None,
               checkpoint=None, progress=None) -> SearchResult:
    """Search until t = T (or ``stop_after``), optionally resuming from a checkpoint file.

    ``checkpoint`` names the file written when the loop stops.  ``progress``
    is called with each metrics row.
    """
    if bool(dataset.video) != cfg.video:
        raise ValueError(f"dataset {dataset.kind} does not fit search target {cfg.target}")
    with T.precision(cfg.precision):
        run = _Run(cfg, dataset)
        if resume_from is not None:
            ckpt = load_checkpoint(resume_from)
            if SearchConfig.from_dict(ckpt["meta"]["config"]) != cfg:
                raise ValueError("checkpoint was written by a different configuration")
            run.restore(ckpt)
        end = run.T if stop_after is None else min(stop_after, run.T)
        for t in range(run.t + 1, end + 1):
            row = run.iterate(t)
            if progress is not None:
                progress(row)
        if checkpoint is not None:
            run.save(checkpoint)
    genotype = None
    if run.t == run.T:
        unresolved = [i for g in run.net.graphs.values() for i in g.unresolved()]
        assert not unresolved, f"unresolved at t=T: {unresolved}"
        assert schedule_value(run.sched, run.T) == len(run.log) or cfg.mode == "das"
        genotype = extract_genotype(run.net.graphs, {"dataset": cfg.dataset, "mode": cfg.mode,
                                                     "schedule": cfg.schedule, "seed": cfg.seed})
    return SearchResult(cfg, run.net, run.log, run.metrics, run.T, run.t, genotype,
                        epoch_losses(run.metrics))


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"iteration", "epoch", "M_t", "reachable_count", "forward_macs"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


def write_outputs(result: SearchResult, out_dir) -> dict[str, Path]:
    """genotype.json, disc_log.txt and metrics.csv for a finished search."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"genotype": out / "genotype.json", "log": out / "disc_log.txt", "metrics": out / "metrics.csv"}
    if result.genotype is not None:
        result.genotype.save(paths["genotype"])
    else:
        paths.pop("genotype")
    result.log.save(paths["log"])
    write_metrics_csv(result.metrics, paths["metrics"])
    return paths
