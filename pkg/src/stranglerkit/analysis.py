"""Context-level coupling analysis and extraction-candidate ranking."""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import networkx as nx

from stranglerkit.model import SystemModel


@dataclass(frozen=True)
class ContextGraph:
    nodes: tuple[str, ...]
    edges: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        for (src, dst), w in self.edges.items():
            if src == dst:
                raise ValueError(f"self-loop on context {src!r}")
            if w < 1:
                raise ValueError(f"edge {src}->{dst} has weight {w}")
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge {src}->{dst} references an unknown context")

    @classmethod
    def from_edges(cls, nodes: Iterable[str], edges: Iterable[tuple[str, str, int]]) -> ContextGraph:
        totals: dict[tuple[str, str], int] = defaultdict(int)
        for src, dst, w in edges:
            totals[(src, dst)] += w
        return cls(tuple(sorted(set(nodes))), dict(totals))


@dataclass(frozen=True, order=True)
class CouplingScore:
    context: str
    in_degree: int
    out_degree: int

    @property
    def total(self) -> int:
        return self.in_degree + self.out_degree

    def as_dict(self) -> dict:
        return {
            "context": self.context,
            "in_degree": self.in_degree,
            "out_degree": self.out_degree,
            "total": self.total,
        }


def build_context_graph(model: SystemModel, weighted: bool = True) -> ContextGraph:
    """Collapse module call edges into context-to-context dependencies.

    With ``weighted=False`` each crossing module edge counts once regardless
    of its call volume.
    """
    ctx = {m.id: m.context for m in model.modules if m.context is not None}
    crossing = []
    for e in model.edges:
        src, dst = ctx.get(e.src), ctx.get(e.dst)
        if src is None or dst is None or src == dst:
            continue
        crossing.append((src, dst, e.weight if weighted else 1))
    return ContextGraph.from_edges(ctx.values(), crossing)


def coupling_scores(graph: ContextGraph) -> list[CouplingScore]:
    incoming: dict[str, int] = defaultdict(int)
    outgoing: dict[str, int] = defaultdict(int)
    for (src, dst), w in graph.edges.items():
        outgoing[src] += w
        incoming[dst] += w
    return [CouplingScore(n, incoming[n], outgoing[n]) for n in sorted(graph.nodes)]


def rank_candidates(graph: ContextGraph) -> list[str]:
    """Contexts ordered from least to most coupled; the head is extracted first."""
    scores = coupling_scores(graph)
    return [s.context for s in sorted(scores, key=lambda s: (s.total, s.context))]


def infer_contexts(model: SystemModel, seed: int = 0, threshold: int = 0) -> dict[str, str]:
    """Propose bounded contexts as connected components of the module graph.

    Only edges heavier than ``threshold`` connect modules. This is a heuristic
    proposal for a human to review; the model is never modified. The partition
    does not depend on ``seed``; the seed only fixes which component gets which
    label number.
    """
    g = nx.Graph()
    g.add_nodes_from(sorted(model.module_index))
    g.add_edges_from((e.src, e.dst) for e in model.edges if e.weight > threshold)
    components = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
    numbers = list(range(len(components)))
    random.Random(seed).shuffle(numbers)
    return {mid: f"ctx{numbers[i]}" for i, comp in enumerate(components) for mid in comp}
