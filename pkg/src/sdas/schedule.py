"""Scheduled discretization of cell graphs.

M one-step discretizations (one per edge plus one per intermediate node,
summed over cell types) are spread over T iterations by a schedule
function.  Each step resolves the highest-priority pending item: an edge is
fixed to its argmax operation; a node, once all its incoming edges are
fixed, keeps its top-k predecessors by sigmoid(beta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .cell import FIXED, RELAXED, CellGraph

SCHEDULES = ("A", "B", "C")


@dataclass(frozen=True)
class Schedule:
    id: str
    M: int
    T: int

    def __post_init__(self):
        if self.id not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.id!r}")
        if self.M < 0 or self.T < 1:
            raise ValueError(f"need M >= 0 and T >= 1, got M={self.M}, T={self.T}")


def total_steps(graphs) -> int:
    """M = E + N summed over cell types."""
    return sum(g.n_edges + g.n_int for g in graphs.values())


def schedule_value(sched: Schedule, t: int) -> int:
    """Number of one-step discretizations due by iteration ``t`` (exact integer floor)."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"iteration {t} outside [0, {sched.T}]")
    M, T_ = sched.M, sched.T
    if sched.id == "A":
        return (M * t) // T_
    if sched.id == "B":
        return (M * t**4) // T_**4
    return (M * (T_**4 - (T_ - t) ** 4)) // T_**4


@dataclass(frozen=True, order=True)
class Item:
    kind: str  # "edge" | "node"
    cell_type: str
    src: int  # node index for node items
    dst: int = -1

    def __str__(self) -> str:
        if self.kind == "edge":
            return f"edge:{self.cell_type}:{self.src}->{self.dst}"
        return f"node:{self.cell_type}:{self.src}"

    @classmethod
    def parse(cls, text: str) -> "Item":
        kind, ct, rest = text.split(":")
        if kind == "edge":
            a, b = rest.split("->")
            return cls("edge", ct, int(a), int(b))
        if kind == "node":
            return cls("node", ct, int(rest))
        raise ValueError(f"bad log item {text!r}")


def _edge_priority(edge) -> float:
    w = np.sort(edge.weights())[::-1]
    return float(w[0] - (w[1] if len(w) > 1 else 0.0))


def _node_ranking(g: CellGraph, i: int) -> list[tuple[float, int]]:
    """(sigmoid(beta), src) of live incoming edges, strongest first, ties by src."""
    return sorted(((e.strength(), e.src) for e in g.incoming(i)), key=lambda p: (-p[0], p[1]))


def node_eligible(g: CellGraph, i: int) -> bool:
    return g.node_state[i] is None and all(e.state == FIXED for e in g.incoming(i, live=False))


def _node_priority(g: CellGraph, i: int) -> float:
    ranked = [s for s, _ in _node_ranking(g, i)]
    below = ranked[g.k] if len(ranked) > g.k else 0.0
    return float(ranked[g.k - 1] - below)


def compute_priorities(graphs) -> list[tuple[float, Item]]:
    """Eligible items with their priorities, highest first."""
    ranked = []
    for ct, g in graphs.items():
        for (j, i), e in g.edges.items():
            if e.state == RELAXED:
                ranked.append((_edge_priority(e), Item("edge", ct, j, i)))
        for i in g.intermediates:
            if node_eligible(g, i):
                ranked.append((_node_priority(g, i), Item("node", ct, i)))
    kind_rank = {"edge": 0, "node": 1}
    ranked.sort(key=lambda p: (-p[0], kind_rank[p[1].kind], p[1].cell_type, p[1].src, p[1].dst))
    return ranked


def decide(graphs, item: Item) -> str:
    """The decision one_step_discretize would take for ``item`` right now."""
    g = graphs[item.cell_type]
    if item.kind == "edge":
        e = g.edges[(item.src, item.dst)]
        if e.state != RELAXED:
            raise ValueError(f"{item} is not a relaxed edge")
        return "op=" + e.candidates[int(np.argmax(e.alpha.data))]
    if not node_eligible(g, item.src):
        raise ValueError(f"{item} is not eligible: it is resolved or has unresolved incoming edges")
    keep = sorted(src for _, src in _node_ranking(g, item.src)[: g.k])
    return "keep=" + ",".join(map(str, keep))


def apply_decision(graphs, item: Item, decision: str) -> None:
    g = graphs[item.cell_type]
    key, _, value = decision.partition("=")
    if item.kind == "edge" and key == "op":
        g.fix_edge(item.src, item.dst, value)
    elif item.kind == "node" and key == "keep":
        if not node_eligible(g, item.src):
            raise ValueError(f"{item} is not eligible")
        g.fix_node(item.src, [int(v) for v in value.split(",")])
    else:
        raise ValueError(f"decision {decision!r} does not fit {item}")


def one_step_discretize(graphs, item: Item) -> str:
    decision = decide(graphs, item)
    apply_decision(graphs, item, decision)
    return decision


def count_reachable(graphs) -> int:
    """Exact number of distinct final genotypes consistent with the current state."""
    total = 1
    for g in graphs.values():
        for i in g.intermediates:
            live = g.incoming(i)
            weights = [1 if e.state == FIXED else len(e.candidates) for e in live]
            if g.node_state[i] is not None:
                total *= math.prod(weights)
            else:
                total *= sum(math.prod(c) for c in combinations(weights, g.k))
    return total


@dataclass
class LogRecord:
    t: int
    item: Item
    priority: float
    decision: str
    reachable: int

    def to_line(self) -> str:
        return f"{self.t}\t{self.item}\t{self.priority:.17g}\t{self.decision}\t{self.reachable}"

    @classmethod
    def from_line(cls, line: str) -> "LogRecord":
        t, item, pr, dec, count = line.rstrip("\n").split("\t")
        return cls(int(t), Item.parse(item), float(pr), dec, int(count))


@dataclass
class DiscretizationLog:
    records: list = field(default_factory=list)
    initial_count: int | None = None

    HEADER = "# t\titem\tpriority\tdecision\treachable_count"

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.t < self.records[-1].t:
            raise ValueError("log iterations must not decrease")
        self.records.append(rec)

    def to_text(self) -> str:
        lines = [self.HEADER]
        if self.initial_count is not None:
            lines.append(f"# initial_reachable_count\t{self.initial_count}")
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DiscretizationLog":
        log = cls()
        for line in text.splitlines():
            if line.startswith("# initial_reachable_count"):
                log.initial_count = int(line.split("\t")[1])
            elif line.strip() and not line.startswith("#"):
                log.append(LogRecord.from_line(line))
        return log

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "DiscretizationLog":
        return cls.from_text(Path(path).read_text())


def step(graphs, sched: Schedule, t: int, log: DiscretizationLog) -> int:
    """Perform the one-step discretizations due at iteration ``t``; returns how many."""
    due = schedule_value(sched, t) - len(log)
    for _ in range(max(due, 0)):
        ranked = compute_priorities(graphs)
        if not ranked:
            break
        priority, item = ranked[0]
        decision = one_step_discretize(graphs, item)
        log.append(LogRecord(t, item, priority, decision, count_reachable(graphs)))
    return max(due, 0)


def discretize_all(graphs, t: int, log: DiscretizationLog) -> None:
    """One-shot discretization: argmax on every edge, then top-k on every node."""
    for ct, g in graphs.items():
        for (j, i), e in list(g.edges.items()):
            if e.state == RELAXED:
                item = Item("edge", ct, j, i)
                pr = _edge_priority(e)
                dec = one_step_discretize(graphs, item)
                log.append(LogRecord(t, item, pr, dec, count_reachable(graphs)))
    for ct, g in graphs.items():
        for i in g.intermediates:
            if g.node_state[i] is None:
                item = Item("node", ct, i)
                pr = _node_priority(g, i)
                dec = one_step_discretize(graphs, item)
                log.append(LogRecord(t, item, pr, dec, count_reachable(graphs)))


def replay(log: DiscretizationLog, graphs) -> None:
    """Re-apply logged decisions (not re-derived) to graphs in their initial state."""
    for rec in log.records:
        apply_decision(graphs, rec.item, rec.decision)
