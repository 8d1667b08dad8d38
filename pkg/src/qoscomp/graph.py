"""Query-specific dependency graphs at any abstraction level.

A graph holds every service that forward-chains from the query inputs and
contributes to producing the query outputs. Nodes are layered by the wave in
which they first activate; all edges run from earlier waves to later ones, so
the graph is acyclic by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .abstraction import Hierarchy
from .repository import Query, ValidationError

SOURCE = "@source"
SINK = "@sink"


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    concepts: frozenset[str]


class DependencyGraph:
    def __init__(
        self,
        level: int,
        query: Query,
        nodes: Mapping[str, object],
        waves: Mapping[str, int],
        feasible: bool,
    ):
        self.level = level
        self.query = query
        self.nodes = dict(nodes)          # id -> Service | AbstractService
        self.waves = dict(waves)          # id -> first activation wave (1-based)
        self.feasible = feasible
        self.producers: dict[str, list[str]] = {}
        for sid in sorted(self.nodes):
            for c in self.nodes[sid].outputs:
                self.producers.setdefault(c, []).append(sid)

    @property
    def nsd(self) -> int:
        """Number of service nodes (virtual source/sink excluded)."""
        return len(self.nodes)

    def producers_of(self, concept: str) -> list[str]:
        return self.producers.get(concept, [])

    def edges(self) -> list[Edge]:
        out: list[Edge] = []
        for sid in sorted(self.nodes):
            node = self.nodes[sid]
            from_source = node.inputs & self.query.inputs
            if from_source:
                out.append(Edge(SOURCE, sid, frozenset(from_source)))
            for pid in sorted(self.nodes):
                if pid == sid or self.waves[pid] >= self.waves[sid]:
                    continue
                carried = self.nodes[pid].outputs & node.inputs
                if carried:
                    out.append(Edge(pid, sid, frozenset(carried)))
        for sid in sorted(self.nodes):
            carried = self.nodes[sid].outputs & self.query.outputs
            if carried:
                out.append(Edge(sid, SINK, frozenset(carried)))
        direct = self.query.inputs & self.query.outputs
        if direct:
            out.append(Edge(SOURCE, SINK, frozenset(direct)))
        return out


def _forward_waves(services, available: set[str]) -> dict[str, int]:
    waves: dict[str, int] = {}
    remaining = sorted(services, key=lambda s: s.id)
    wave = 0
    while remaining:
        wave += 1
        ready = [s for s in remaining if s.inputs <= available]
        if not ready:
            break
        for s in ready:
            waves[s.id] = wave
        for s in ready:
            available |= s.outputs
        ready_ids = {s.id for s in ready}
        remaining = [s for s in remaining if s.id not in ready_ids]
    return waves


def build_graph(hierarchy: Hierarchy, level: int, query: Query) -> DependencyGraph:
    """Forward-chain from the query inputs, then prune backward-irrelevant nodes.

    Returns a graph flagged infeasible when the query outputs cannot all be
    produced; the forward-activated nodes are kept for diagnostics.
    """
    services = hierarchy.services_at(level)
    waves = _forward_waves(services, set(query.inputs))
    activated = {s.id: s for s in services if s.id in waves}
    producible = set(query.inputs).union(*(s.outputs for s in activated.values())) \
        if activated else set(query.inputs)
    if not set(query.outputs) <= producible:
        return DependencyGraph(level, query, activated, waves, feasible=False)

    needed = set(query.outputs) - set(query.inputs)
    relevant: set[str] = set()
    frontier = set(needed)
    while frontier:
        next_frontier: set[str] = set()
        for sid, svc in activated.items():
            if sid in relevant or not (svc.outputs & frontier):
                continue
            relevant.add(sid)
            next_frontier |= svc.inputs - set(query.inputs)
        frontier = next_frontier - needed
        needed |= next_frontier

    kept = {sid: activated[sid] for sid in relevant}
    kept_waves = _forward_waves(kept.values(), set(query.inputs))
    if len(kept_waves) != len(kept):
        raise ValidationError("backward pruning broke forward closure")
    return DependencyGraph(level, query, kept, kept_waves, feasible=True)


def is_subservice(a_id: str, b_id: str, hierarchy: Hierarchy) -> bool:
    """True when fused service ``a`` is redundant next to fused service ``b``.

    Holds for a strictly smaller member closure, and for equal closures with
    the larger id (so exactly one of an identical pair survives).
    """
    a = hierarchy.by_id[4][a_id]
    b = hierarchy.by_id[4][b_id]
    if a_id == b_id:
        return False
    members_a, members_b = set(a.members), set(b.members)
    if members_a < members_b:
        return True
    return members_a == members_b and a_id > b_id


def eliminate_subservices(graph: DependencyGraph, hierarchy: Hierarchy) -> DependencyGraph:
    """Drop fused nodes whose closure is covered by an earlier-or-same-wave node.

    A covering node activated no later than the covered one already supplies
    every output the covered node could add, so removal never breaks
    feasibility. A covered node that activates strictly earlier than its
    cover is kept: later activations may depend on its outputs before the
    cover is available.
    """
    if graph.level != 4:
        raise ValidationError("sub-service elimination applies to level-4 graphs")
    order = sorted(
        graph.nodes,
        key=lambda sid: (
            graph.waves[sid],
            -len(hierarchy.by_id[4][sid].members),
            sid,
        ),
    )
    retained: list[str] = []
    for sid in order:
        covered = any(
            graph.waves[keeper] <= graph.waves[sid]
            and is_subservice(sid, keeper, hierarchy)
            for keeper in retained
        )
        if not covered:
            retained.append(sid)
    kept = {sid: graph.nodes[sid] for sid in retained}
    kept_waves = _forward_waves(kept.values(), set(graph.query.inputs))
    if len(kept_waves) != len(kept):
        raise ValidationError("sub-service elimination broke forward closure")
    return DependencyGraph(graph.level, graph.query, kept, kept_waves, graph.feasible)


def format_graph(graph: DependencyGraph, hierarchy: Hierarchy | None = None) -> str:
    lines = [
        f"level: {graph.level}",
        f"feasible: {str(graph.feasible).lower()}",
        f"nodes: {graph.nsd}",
    ]
    for sid in sorted(graph.nodes, key=lambda s: (graph.waves[s], s)):
        node = graph.nodes[sid]
        members = len(getattr(node, "members", ()) or ()) or 1
        lines.append(f"node {sid} | wave: {graph.waves[sid]} | members: {members}")
    for edge in graph.edges():
        lines.append(f"edge {edge.src} -> {edge.dst} | {', '.join(sorted(edge.concepts))}")
    return "\n".join(lines) + "\n"
