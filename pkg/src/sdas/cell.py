"""Relaxed and discretized cell DAGs.

Nodes 0 and 1 of a cell are its inputs (outputs of the two previous cells);
nodes 2 .. n_int + 1 are intermediate.  Every intermediate node starts with
an edge from each predecessor.  A relaxed edge mixes all of its candidate
operations with softmax(alpha) weights and scales the mixture by
sigmoid(beta).  Architecture parameters live on the ``CellGraph`` and are
shared by every repeat of the cell type; operation weights live on each
``SearchCell`` replica.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Module, ModuleDict, ReLUConvBN
from .ops import OP_SETS, OperationSpec, build_operation, make_spec
from .tensor import Parameter, ShapeError, Tensor

CELL_STRIDES = {
    "normal": None,
    "reduction": (2, 2),
    "s_reduction": (1, 2, 2),
    "st_reduction": (2, 2, 2),
}
CELL_ORDER = tuple(CELL_STRIDES)

RELAXED, FIXED, REMOVED = "relaxed", "fixed", "removed"


class UnresolvedError(ValueError):
    """Raised when a discrete architecture is requested from a partially relaxed cell."""

    def __init__(self, items):
        self.items = list(items)
        super().__init__("unresolved items: " + ", ".join(self.items))


def edge_key(j: int, i: int) -> str:
    return f"{j}_{i}"


@dataclass
class Edge:
    src: int
    dst: int
    candidates: tuple
    alpha: Parameter | None = None
    beta: Parameter | None = None
    state: str = RELAXED
    op: str | None = None

    @property
    def key(self) -> str:
        return edge_key(self.src, self.dst)

    def weights(self) -> np.ndarray:
        """softmax(alpha) as a plain array."""
        a = self.alpha.data.astype(np.float64)
        e = np.exp(a - a.max())
        return e / e.sum()

    def strength(self) -> float:
        """sigmoid(beta) as a float."""
        return float(1.0 / (1.0 + np.exp(-float(self.beta.data.reshape(-1)[0]))))


class CellGraph:
    """Architecture state of one cell type."""

    def __init__(self, cell_type: str, op_set: str, video: bool, n_int: int = 4, k: int = 2,
                 ops=None):
        if cell_type not in CELL_STRIDES:
            raise ValueError(f"unknown cell type {cell_type!r}")
        stride = CELL_STRIDES[cell_type]
        if stride is not None and len(stride) != (3 if video else 2):
            raise ValueError(f"{cell_type} cells need {'image' if video else 'video'} input")
        if n_int < 1 or not 1 <= k <= 2:
            raise ValueError(f"need n_int >= 1 and 1 <= k <= 2 (the first node has two inputs), got {n_int}, {k}")
        self.cell_type = cell_type
        self.op_set = op_set.lower()
        if self.op_set not in OP_SETS:
            raise ValueError(f"unknown op set {op_set!r}")
        self.video = video
        # optional restriction of the candidate list to a subset of the op set
        self.ops = tuple(OP_SETS[self.op_set]) if ops is None else tuple(ops)
        bad = [o for o in self.ops if o not in OP_SETS[self.op_set]]
        if bad or not self.ops:
            raise ValueError(f"ops {bad or '[]'} are not a non-empty subset of {self.op_set}")
        self.n_int = n_int
        self.k = k
        self.edges: dict[tuple[int, int], Edge] = {}
        self.node_state: dict[int, tuple | None] = {}
        self.replicas: list["SearchCell"] = []
        dt = T.get_default_dtype()
        for i in self.intermediates:
            self.node_state[i] = None
            for j in range(i):
                cands = tuple(op for op in self.ops
                              if not (self.edge_is_strided(j) and make_spec(op, video).channelwise))
                self.edges[(j, i)] = Edge(j, i, cands, alpha=Parameter(np.zeros(len(cands)), dtype=dt),
                                          beta=Parameter(np.zeros(1), dtype=dt))

    @classmethod
    def from_genotype(cls, genotype: "Genotype", cell_type: str) -> "CellGraph":
        """A fully discretized graph whose surviving edges carry the genotype's ops."""
        meta = genotype.meta
        g = cls(cell_type, meta["op_set"], meta.get("video", False), meta["n_int"], meta["k"])
        for idx, pairs in enumerate(genotype.cells[cell_type]["nodes"]):
            i = idx + 2
            chosen = dict((src, op) for src, op in pairs)
            for j in range(i):
                e = g.edges[(j, i)]
                e.alpha = e.beta = None
                if j in chosen:
                    if chosen[j] not in e.candidates:
                        raise ValueError(f"{cell_type}: op {chosen[j]} is not legal on edge {j}->{i}")
                    e.state, e.op = FIXED, chosen[j]
                else:
                    e.state = REMOVED
            g.node_state[i] = tuple(sorted(chosen))
        return g

    @property
    def stride(self) -> tuple | None:
        return CELL_STRIDES[self.cell_type]

    @property
    def is_reduction(self) -> bool:
        return self.stride is not None

    @property
    def intermediates(self) -> range:
        return range(2, self.n_int + 2)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_is_strided(self, src: int) -> bool:
        return self.is_reduction and src < 2

    def edge_stride(self, src: int) -> tuple:
        ones = (1,) * (3 if self.video else 2)
        return self.stride if self.edge_is_strided(src) else ones

    def spec_for(self, src: int, op_id: str) -> OperationSpec:
        return make_spec(op_id, self.video).with_stride(self.edge_stride(src))

    def incoming(self, i: int, live: bool = True) -> list[Edge]:
        es = [self.edges[(j, i)] for j in range(i)]
        return [e for e in es if e.state != REMOVED] if live else es

    def arch_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for (j, i), e in self.edges.items():
            if e.alpha is not None:
                out[f"{prefix}{self.cell_type}.alpha.{j}_{i}"] = e.alpha
            if e.beta is not None:
                out[f"{prefix}{self.cell_type}.beta.{j}_{i}"] = e.beta
        return out

    def attach(self, cell: "SearchCell") -> None:
        self.replicas.append(cell)

    # mutations (called by the scheduler only)

    def fix_edge(self, j: int, i: int, op: str) -> None:
        e = self.edges[(j, i)]
        if e.state != RELAXED:
            raise ValueError(f"edge {j}->{i} of {self.cell_type} is not relaxed")
        if op not in e.candidates:
            raise ValueError(f"{op} is not a candidate on edge {j}->{i}")
        e.state, e.op, e.alpha = FIXED, op, None
        for cell in self.replicas:
            cell.prune_edge(e.key, keep=op)

    def fix_node(self, i: int, keep) -> None:
        if self.node_state[i] is not None:
            raise ValueError(f"node {i} of {self.cell_type} is already discretized")
        keep = tuple(sorted(int(j) for j in keep))
        if len(keep) != self.k:
            raise ValueError(f"node {i} must keep exactly {self.k} predecessors, got {keep}")
        for e in self.incoming(i, live=False):
            if e.state != FIXED:
                raise ValueError(f"node {i} of {self.cell_type} has unresolved edge {e.src}->{i}")
        for e in self.incoming(i, live=False):
            e.beta = None
            if e.src not in keep:
                e.state = REMOVED
                for cell in self.replicas:
                    cell.prune_edge(e.key, keep=None)
        self.node_state[i] = keep

    def unresolved(self) -> list[str]:
        items = [f"edge {self.cell_type}:{j}->{i}" for (j, i), e in self.edges.items() if e.state == RELAXED]
        items += [f"node {self.cell_type}:{i}" for i, s in self.node_state.items() if s is None]
        return items

    def state(self) -> dict:
        return {
            "cell_type": self.cell_type,
            "edges": {e.key: {"state": e.state, "op": e.op, "alpha": e.alpha is not None,
                              "beta": e.beta is not None} for e in self.edges.values()},
            "nodes": {str(i): (list(s) if s is not None else None) for i, s in self.node_state.items()},
        }


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


def mixed_edge_forward(edge: Edge, ops, x: Tensor) -> Tensor:
    """Output of one edge given its live operation instances ``ops[op_id]``."""
    if edge.state == REMOVED:
        raise ValueError(f"edge {edge.src}->{edge.dst} was removed")
    if edge.state == RELAXED:
        y = T.weighted_sum(T.softmax(edge.alpha), [ops[o](x) for o in edge.candidates])
    else:
        y = ops[edge.op](x)
    if edge.beta is not None:
        y = T.weighted_sum(T.sigmoid(edge.beta), [y])
    return y


def node_forward(graph: CellGraph, i: int, states: list[Tensor], edge_ops) -> Tensor:
    live = graph.incoming(i)
    if not live:
        raise ValueError(f"node {i} of {graph.cell_type} has no live incoming edge")
    return T.add_n([mixed_edge_forward(e, edge_ops[e.key], states[e.src]) for e in live])


class SearchCell(Module):
    """One repeat of a cell type: input projections plus per-edge operation instances."""

    def __init__(self, graph: CellGraph, c_pp: int, c_p: int, c: int, prev_stride: tuple | None,
                 rng: np.random.Generator):
        super().__init__()
        self.graph = graph
        self.channels = c
        ones = (1,) * (3 if graph.video else 2)
        self.pre0 = ReLUConvBN(c_pp, c, prev_stride or ones, rng)
        self.pre1 = ReLUConvBN(c_p, c, ones, rng)
        self.edge_ops = ModuleDict()
        for (j, i), e in graph.edges.items():
            if e.state == REMOVED:
                continue
            live = e.candidates if e.state == RELAXED else (e.op,)
            ops = ModuleDict()
            for op in e.candidates:
                seed = int(rng.integers(2**63))
                if op in live:
                    ops[op] = build_operation(graph.spec_for(j, op), c, seed)
            self.edge_ops[e.key] = ops
        graph.attach(self)

    def prune_edge(self, key: str, keep: str | None) -> None:
        ops = self.edge_ops[key]
        if keep is None:
            del self.edge_ops[key]
            return
        for op in list(ops.keys()):
            if op != keep:
                del ops[op]

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        s0, s1 = self.pre0(s0), self.pre1(s1)
        if s0.shape != s1.shape:
            raise ShapeError("cell", f"preprocessed inputs differ: {s0.shape} vs {s1.shape}",
                             [a for a in range(s0.ndim) if s0.shape[a] != s1.shape[a]])
        states = [s0, s1]
        for i in self.graph.intermediates:
            states.append(node_forward(self.graph, i, states, self.edge_ops))
        return T.concat(states[2:], axis=1)

    def macs(self, shape_pp, shape_p) -> tuple[int, tuple]:
        m0, s0 = self.pre0.macs(shape_pp)
        m1, s1 = self.pre1.macs(shape_p)
        total = m0 + m1
        shapes = {0: s0, 1: s1}
        for i in self.graph.intermediates:
            out = None
            for e in self.graph.incoming(i):
                ops = self.edge_ops[e.key]
                live = e.candidates if e.state == RELAXED else (e.op,)
                for op in live:
                    m, out = ops[op].macs(shapes[e.src])
                    total += m
                if e.state == RELAXED:
                    total += len(live) * int(np.prod(out))
                if e.beta is not None:
                    total += int(np.prod(out))
            total += (len(self.graph.incoming(i)) - 1) * int(np.prod(out))
            shapes[i] = out
        c = shapes[2][0] * self.graph.n_int
        return total, (c,) + tuple(shapes[2][1:])


def cell_forward(cell: SearchCell, prev_prev: Tensor, prev: Tensor) -> Tensor:
    return cell(prev_prev, prev)


# ---------------------------------------------------------------------------
# genotype
# ---------------------------------------------------------------------------


@dataclass
class Genotype:
    """Per cell type: each intermediate node's k (source, op_id) pairs."""

    cells: dict
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        op_set = self.meta.get("op_set")
        k = self.meta.get("k")
        n_int = self.meta.get("n_int")
        video = self.meta.get("video", False)
        if op_set not in OP_SETS:
            raise ValueError(f"meta.op_set must be one of {sorted(OP_SETS)}, got {op_set!r}")
        if not isinstance(k, int) or not isinstance(n_int, int) or k < 1 or n_int < 1:
            raise ValueError("meta.k and meta.n_int must be positive integers")
        if not self.cells:
            raise ValueError("genotype has no cells")
        for ct, cell in self.cells.items():
            if ct not in CELL_STRIDES:
                raise ValueError(f"unknown cell type {ct!r}")
            nodes = cell.get("nodes")
            if not isinstance(nodes, list) or len(nodes) != n_int:
                raise ValueError(f"cells.{ct}.nodes must list {n_int} nodes")
            for idx, pairs in enumerate(nodes):
                i = idx + 2
                if len(pairs) != k:
                    raise ValueError(f"cells.{ct}.nodes[{idx}] has {len(pairs)} pairs, expected {k}")
                srcs = [p[0] for p in pairs]
                if len(set(srcs)) != len(srcs):
                    raise ValueError(f"cells.{ct}.nodes[{idx}] repeats a source")
                for src, op in pairs:
                    if not isinstance(src, int) or not 0 <= src < i:
                        raise ValueError(f"cells.{ct}.nodes[{idx}]: source {src!r} does not precede node {i}")
                    if op not in OP_SETS[op_set]:
                        raise ValueError(f"cells.{ct}.nodes[{idx}]: op {op!r} not in {op_set}")
                    if CELL_STRIDES[ct] is not None and src < 2 and make_spec(op, video).channelwise:
                        raise ValueError(f"cells.{ct}.nodes[{idx}]: {op} cannot sit on a strided edge")
            if list(cell.get("concat", [])) != list(range(2, n_int + 2)):
                raise ValueError(f"cells.{ct}.concat must be {list(range(2, n_int + 2))}")

    def to_dict(self) -> dict:
        return {
            "meta": dict(self.meta),
            "cells": {ct: {"nodes": [[[src, op] for src, op in pairs] for pairs in c["nodes"]],
                           "concat": list(c["concat"])}
                      for ct, c in self.cells.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        if not isinstance(d, dict) or "meta" not in d or "cells" not in d:
            raise ValueError("genotype must be an object with 'meta' and 'cells'")
        cells = {}
        for ct, c in d["cells"].items():
            if not isinstance(c, dict) or "nodes" not in c:
                raise ValueError(f"cells.{ct} must be an object with 'nodes'")
            nodes = []
            for pairs in c["nodes"]:
                node = []
                for p in pairs:
                    if not isinstance(p, (list, tuple)) or len(p) != 2:
                        raise ValueError(f"cells.{ct}: pair {p!r} must be [source, op_id]")
                    src = p[0]
                    if isinstance(src, str) and src.lstrip("-").isdigit():
                        src = int(src)
                    node.append((src, str(p[1])))
                nodes.append(node)
            cells[ct] = {"nodes": nodes, "concat": list(c.get("concat", []))}
        g = cls(cells=cells, meta=dict(d["meta"]))
        g.validate()
        return g

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"genotype is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Genotype":
        return cls.from_json(Path(path).read_text())

    def edge_list(self, cell_type: str) -> list[tuple[int, int, str]]:
        return [(src, idx + 2, op) for idx, pairs in enumerate(self.cells[cell_type]["nodes"])
                for src, op in pairs]

    def __eq__(self, other) -> bool:
        return isinstance(other, Genotype) and self.to_dict() == other.to_dict()


def extract_genotype(graphs: dict, meta: dict | None = None) -> Genotype:
    missing = [item for g in graphs.values() for item in g.unresolved()]
    if missing:
        raise UnresolvedError(missing)
    first = next(iter(graphs.values()))
    full_meta = {"op_set": first.op_set, "n_int": first.n_int, "k": first.k, "video": first.video}
    if first.ops != tuple(OP_SETS[first.op_set]):
        full_meta["ops"] = list(first.ops)
    full_meta.update(meta or {})
    cells = {}
    for ct, g in graphs.items():
        nodes = [[(j, g.edges[(j, i)].op) for j in g.node_state[i]] for i in g.intermediates]
        cells[ct] = {"nodes": nodes, "concat": list(g.intermediates)}
    geno = Genotype(cells=cells, meta=full_meta)
    geno.validate()
    return geno


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def _node_name(idx: int) -> str:
    return {0: "c_{k-2}", 1: "c_{k-1}"}.get(idx, str(idx - 2))


def genotype_to_dot(genotype: Genotype, cell_type: str) -> str:
    lines = [f"digraph {cell_type} {{", "  rankdir=LR;",
             '  node [style=filled, fontname="helvetica"];',
             '  "c_{k-2}" [shape=box, fillcolor=darkseagreen2];',
             '  "c_{k-1}" [shape=box, fillcolor=darkseagreen2];']
    n_int = len(genotype.cells[cell_type]["nodes"])
    for i in range(n_int):
        lines.append(f'  "{i}" [shape=circle, fillcolor=lightblue];')
    lines.append('  "c_{k}" [shape=box, fillcolor=palegoldenrod];')
    for src, dst, op in genotype.edge_list(cell_type):
        lines.append(f'  "{_node_name(src)}" -> "{_node_name(dst)}" [label="{op}"];')
    for i in range(n_int):
        lines.append(f'  "{i}" -> "c_{{k}}" [style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


_DOT_EDGE = re.compile(r'^\s*"([^"]+)"\s*->\s*"([^"]+)"\s*\[label="([^"]+)"\];\s*$')


def parse_dot_edges(text: str) -> list[tuple[int, int, str]]:
    """Labeled edges of an exported cell as (src, dst, op_id) node indices."""
    index = {"c_{k-2}": 0, "c_{k-1}": 1}
    edges = []
    for line in text.splitlines():
        m = _DOT_EDGE.match(line)
        if m:
            a, b, op = m.groups()
            edges.append((index.get(a, None) if a in index else int(a) + 2, int(b) + 2, op))
    return edges
