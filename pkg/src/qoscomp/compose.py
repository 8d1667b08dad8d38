"""Composition engines over a dependency graph.

Three entry points:

* ``optimal_single`` -- exact wave DP for chain-aggregated and bottleneck
  parameters, greedy cover for the NP-hard ones (flagged non-optimal).
* ``constrained_multi`` -- best-first search over partial covers with
  monotone bound pruning; returns the first bound-satisfying solution, or
  the least-violating one found.
* ``all_feasible`` -- exhaustive enumeration of minimal feasible solution
  subgraphs, used as the desk-scale oracle.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .graph import SINK, SOURCE, DependencyGraph, Edge
from .repository import Query, QoSParam, ValidationError


@dataclass
class Solution:
    level: int
    chosen: tuple[str, ...]
    wiring: tuple[Edge, ...]
    qos: dict[str, float]
    feasible: bool
    satisfied: bool | None = None
    violated: tuple[str, ...] = ()
    optimal: bool = True
    truncated: bool = False
    # Per-node effective QoS vectors / member subsets / concrete picks.
    # Refinement adjusts these on its private copy; the hierarchy itself is
    # never touched.
    node_qos: dict[str, dict[str, float]] = field(default_factory=dict)
    node_members: dict[str, tuple[str, ...]] = field(default_factory=dict)
    node_pick: dict[str, str] = field(default_factory=dict)

    def clone(self) -> "Solution":
        return replace(
            self,
            qos=dict(self.qos),
            node_qos={k: dict(v) for k, v in self.node_qos.items()},
            node_members=dict(self.node_members),
            node_pick=dict(self.node_pick),
        )


def infeasible_solution(level: int) -> Solution:
    return Solution(level, (), (), {}, feasible=False, satisfied=False)


# --- wiring and aggregation ---------------------------------------------------


def layer_services(
    services: Mapping[str, object], inputs: frozenset[str]
) -> dict[str, int] | None:
    """Wave-layer a service set from the given inputs; None when some service
    never activates."""
    waves: dict[str, int] = {}
    available = set(inputs)
    remaining = sorted(services)
    wave = 0
    while remaining:
        wave += 1
        ready = [sid for sid in remaining if services[sid].inputs <= available]
        if not ready:
            return None
        for sid in ready:
            waves[sid] = wave
            available |= services[sid].outputs
        remaining = [sid for sid in remaining if sid not in waves]
    return waves


def build_wiring(
    chosen: Mapping[str, object], query: Query
) -> tuple[tuple[Edge, ...], dict[str, int]] | None:
    """Designate one producer per consumed concept and lay out the DAG.

    Returns None when the chosen set cannot forward-chain from the query
    inputs or does not cover the query outputs.
    """
    waves = layer_services(chosen, query.inputs)
    if waves is None:
        return None
    produced = set(query.inputs)
    for svc in chosen.values():
        produced |= svc.outputs
    if not set(query.outputs) <= produced:
        return None

    def provider(concept: str, before_wave: float) -> str:
        if concept in query.inputs:
            return SOURCE
        candidates = [
            sid
            for sid, svc in chosen.items()
            if concept in svc.outputs and waves[sid] < before_wave
        ]
        return min(candidates, key=lambda sid: (waves[sid], sid))

    links: dict[tuple[str, str], set[str]] = {}
    for sid in sorted(chosen):
        for concept in sorted(chosen[sid].inputs):
            src = provider(concept, waves[sid])
            links.setdefault((src, sid), set()).add(concept)
    for concept in sorted(query.outputs):
        src = provider(concept, math.inf)
        links.setdefault((src, SINK), set()).add(concept)
    edges = tuple(
        Edge(src, dst, frozenset(concepts))
        for (src, dst), concepts in sorted(links.items())
    )
    return edges, waves


def _aggregate(
    vectors: Mapping[str, Mapping[str, float]],
    wiring: Sequence[Edge],
    registry: Sequence[QoSParam],
) -> dict[str, float]:
    out: dict[str, float] = {}
    chain_params = [p for p in registry if p.seq_agg == "sum" and p.par_agg == "max"]
    if chain_params:
        providers: dict[str, list[str]] = {}
        for e in wiring:
            if e.src != SOURCE and e.dst != SINK:
                providers.setdefault(e.dst, []).append(e.src)

        completion: dict[str, dict[str, float]] = {}

        def complete(sid: str) -> dict[str, float]:
            if sid not in completion:
                starts = {p.name: 0.0 for p in chain_params}
                for src in providers.get(sid, ()):
                    up = complete(src)
                    for p in chain_params:
                        starts[p.name] = max(starts[p.name], up[p.name])
                completion[sid] = {
                    p.name: starts[p.name] + vectors[sid][p.name]
                    for p in chain_params
                }
            return completion[sid]

        for sid in sorted(vectors):
            complete(sid)
        for p in chain_params:
            out[p.name] = max(
                (completion[sid][p.name] for sid in vectors), default=0.0
            )
    for p in registry:
        if p.name not in out:
            out[p.name] = p.fold(vectors[sid][p.name] for sid in vectors)
    return out


def aggregate_qos(solution: Solution, registry: Sequence[QoSParam]) -> dict[str, float]:
    """Recompute the aggregate vector from the solution's wiring and node vectors."""
    vectors = {sid: solution.node_qos[sid] for sid in solution.chosen}
    return _aggregate(vectors, solution.wiring, registry)


def make_solution(
    graph: DependencyGraph,
    chosen_ids: Sequence[str],
    registry: Sequence[QoSParam],
    bounds: Mapping[str, float] | None = None,
    *,
    optimal: bool = True,
    truncated: bool = False,
) -> Solution | None:
    """Assemble, wire and evaluate a solution from a chosen node set."""
    chosen = {sid: graph.nodes[sid] for sid in chosen_ids}
    wired = build_wiring(chosen, graph.query)
    if wired is None:
        return None
    edges, _ = wired
    node_qos = {sid: dict(graph.nodes[sid].qos) for sid in chosen}
    qos = _aggregate(node_qos, edges, registry)
    sol = Solution(
        level=graph.level,
        chosen=tuple(sorted(chosen)),
        wiring=edges,
        qos=qos,
        feasible=True,
        optimal=optimal,
        truncated=truncated,
        node_qos=node_qos,
    )
    if bounds is not None:
        classify(sol, bounds, registry)
    return sol


def classify(
    sol: Solution, bounds: Mapping[str, float], registry: Sequence[QoSParam]
) -> None:
    params = {p.name: p for p in registry}
    sol.violated = tuple(
        name
        for name in sorted(bounds)
        if not params[name].better_or_equal(sol.qos[name], bounds[name])
    )
    sol.satisfied = not sol.violated


def validate_solution(
    sol: Solution, query: Query, services: Mapping[str, object]
) -> bool:
    """Structural check, independent of any engine."""
    if not sol.feasible:
        return False
    chosen = {sid: services[sid] for sid in sol.chosen}
    waves = layer_services(chosen, query.inputs)
    if waves is None:
        return False
    produced = set(query.inputs)
    for svc in chosen.values():
        produced |= svc.outputs
    if not set(query.outputs) <= produced:
        return False
    for e in sol.wiring:
        if e.src != SOURCE and e.dst != SINK and waves[e.src] >= waves[e.dst]:
            return False
        if e.src != SOURCE and not e.concepts <= services[e.src].outputs:
            return False
        if e.dst != SINK and not e.concepts <= services[e.dst].inputs:
            return False
        if e.src == SOURCE and not e.concepts <= query.inputs:
            return False
    return True


# --- bound utilization ----------------------------------------------------------


def utilization(value: float, bound: float, param: QoSParam) -> float:
    """How much of a bound a value consumes; > 1 means the bound is violated."""
    if param.monotonicity == "negative":
        if bound > 0:
            return value / bound
        return 0.0 if value <= bound else math.inf
    if value > 0:
        return bound / value
    return 0.0 if bound <= 0 else math.inf


def _priority(
    values: Mapping[str, float],
    bounds: Mapping[str, float],
    params: Mapping[str, QoSParam],
) -> tuple[float, ...]:
    utils = [
        utilization(values[name], bounds[name], params[name])
        for name in sorted(bounds)
    ]
    return tuple(sorted(utils, reverse=True))


def _partial_floor(
    chosen: Mapping[str, object], registry: Sequence[QoSParam]
) -> dict[str, float]:
    """Monotone per-parameter lower bounds for any completion of ``chosen``."""
    floor: dict[str, float] = {}
    for p in registry:
        values = [svc.qos[p.name] for svc in chosen.values()]
        if p.seq_agg == "sum" and p.par_agg == "max":
            floor[p.name] = max(values, default=0.0)  # exact chain computed lazily
        else:
            floor[p.name] = p.fold(values)
    return floor


def _floor_violates(
    floor: Mapping[str, float],
    bounds: Mapping[str, float],
    params: Mapping[str, QoSParam],
) -> bool:
    return any(
        not params[name].better_or_equal(floor[name], bounds[name]) for name in bounds
    )


# --- exhaustive enumeration -------------------------------------------------------


def all_feasible(
    graph: DependencyGraph, registry: Sequence[QoSParam], cap: int = 256
) -> tuple[list[Solution], bool]:
    """Enumerate minimal feasible solution subgraphs in deterministic order.

    Returns (solutions, truncated). Solutions carry no bound classification.
    """
    if not graph.feasible:
        return [], False
    query = graph.query
    found: list[frozenset[str]] = []
    found_set: set[frozenset[str]] = set()
    seen_states: set[tuple[frozenset[str], frozenset[str]]] = set()
    truncated = False

    start_pending = frozenset(query.outputs - query.inputs)
    stack: list[tuple[frozenset[str], frozenset[str]]] = [(start_pending, frozenset())]
    while stack:
        pending, chosen = stack.pop()
        if (pending, chosen) in seen_states:
            continue
        seen_states.add((pending, chosen))
        if not pending:
            if chosen not in found_set:
                found_set.add(chosen)
                found.append(chosen)
                if len(found) >= cap:
                    truncated = True
                    break
            continue
        concept = min(pending)
        for sid in reversed(graph.producers_of(concept)):
            if sid in chosen:
                continue
            new_chosen = chosen | {sid}
            covered = set(query.inputs)
            for cid in new_chosen:
                covered |= graph.nodes[cid].outputs
            new_pending = frozenset(
                (set(pending) | set(graph.nodes[sid].inputs)) - covered
            )
            stack.append((new_pending, new_chosen))

    valid_sets = [
        chosen
        for chosen in found
        if layer_services({sid: graph.nodes[sid] for sid in chosen}, query.inputs)
        is not None
    ]
    minimal = [s for s in valid_sets if not any(o < s for o in valid_sets)]
    minimal.sort(key=lambda s: (len(s), tuple(sorted(s))))
    solutions = []
    for chosen in minimal:
        sol = make_solution(graph, sorted(chosen), registry)
        if sol is not None:
            solutions.append(sol)
    return solutions, truncated


# --- constrained search -------------------------------------------------------------


def constrained_multi(
    graph: DependencyGraph,
    bounds: Mapping[str, float],
    registry: Sequence[QoSParam],
    *,
    node_budget: int = 200_000,
    fallback_cap: int = 4096,
) -> Solution:
    """Best-first constrained composition.

    Returns the bound-satisfying solution with the smallest worst bound
    consumption, or, when none exists, the least-violating solution found
    (fewest violated bounds, then smallest worst violation).
    """
    if not graph.feasible:
        return infeasible_solution(graph.level)
    params = {p.name: p for p in registry}
    query = graph.query
    start_pending = frozenset(query.outputs - query.inputs)

    heap: list = []
    counter = 0

    def push(priority, exact, pending, chosen):
        nonlocal counter
        counter += 1
        heapq.heappush(
            heap,
            (priority, len(chosen), tuple(sorted(chosen)), not exact, counter, pending, chosen),
        )

    push(() if not bounds else _priority(_partial_floor({}, registry), bounds, params),
         False, start_pending, frozenset())
    seen: set[tuple[frozenset[str], frozenset[str]]] = set()
    pops = 0
    exhausted = True
    while heap:
        _, _, _, inexact, _, pending, chosen = heapq.heappop(heap)
        pops += 1
        if pops > node_budget:
            exhausted = False
            break
        if not pending:
            sol = make_solution(graph, sorted(chosen), registry, bounds)
            if sol is None:
                continue
            if not bounds:
                return sol
            if inexact:
                if sol.violated:
                    continue
                push(_priority(sol.qos, bounds, params), True, pending, chosen)
                continue
            return sol
        state = (pending, chosen)
        if state in seen:
            continue
        seen.add(state)
        concept = min(pending)
        for sid in graph.producers_of(concept):
            if sid in chosen:
                continue
            new_chosen = chosen | {sid}
            covered = set(query.inputs)
            for cid in new_chosen:
                covered |= graph.nodes[cid].outputs
            new_pending = frozenset(
                (set(pending) | set(graph.nodes[sid].inputs)) - covered
            )
            chosen_map = {cid: graph.nodes[cid] for cid in new_chosen}
            floor = _partial_floor(chosen_map, registry)
            if bounds and _floor_violates(floor, bounds, params):
                continue
            push(
                _priority(floor, bounds, params) if bounds else (),
                False,
                new_pending,
                new_chosen,
            )

    # No satisfying solution (or budget ran out): report the least-violating one.
    candidates, truncated = all_feasible(graph, registry, cap=fallback_cap)
    if not candidates:
        sol = infeasible_solution(graph.level)
        sol.truncated = not exhausted or truncated
        return sol

    def violation_rank(sol: Solution):
        classify(sol, bounds, registry)
        worst = max(
            (utilization(sol.qos[n], bounds[n], params[n]) for n in sol.violated),
            default=0.0,
        )
        return (len(sol.violated), worst, _priority(sol.qos, bounds, params), sol.chosen)

    best = min(candidates, key=violation_rank)
    classify(best, bounds, registry)
    best.truncated = not exhausted or truncated
    return best


# --- single-objective engines ----------------------------------------------------


def optimal_single(
    graph: DependencyGraph, param_name: str, registry: Sequence[QoSParam]
) -> Solution:
    """Feasible solution optimizing one parameter.

    Chain parameters (sum along a path, max across branches) and bottleneck
    parameters (min aggregation, positively monotonic) are solved exactly by
    dynamic programming on activation waves; other parameters use a greedy
    cover heuristic and the result is flagged non-optimal.
    """
    params = {p.name: p for p in registry}
    if param_name not in params:
        raise ValidationError(f"unregistered parameter {param_name!r}")
    if not graph.feasible:
        return infeasible_solution(graph.level)
    param = params[param_name]
    if param.seq_agg == "sum" and param.par_agg == "max" and param.monotonicity == "negative":
        chosen = _extract_chain_optimal(graph, param_name)
    elif param.par_agg == "min" and param.monotonicity == "positive":
        chosen = _extract_bottleneck_optimal(graph, param_name)
    else:
        return _greedy_cover(graph, param, registry)
    sol = make_solution(graph, sorted(chosen), registry)
    if sol is None:
        # Zero-valued ties can make the extraction pick a producer that feeds
        # itself; fall back to an exact A* over covers.
        sol = _exact_search_single(graph, param, registry)
    return sol


def _extract_chain_optimal(graph: DependencyGraph, name: str) -> set[str]:
    query = graph.query
    ec: dict[str, float] = {c: 0.0 for c in query.inputs}
    done: dict[str, float] = {}
    changed = True
    while changed:
        changed = False
        for sid in sorted(graph.nodes):
            svc = graph.nodes[sid]
            if not all(c in ec for c in svc.inputs):
                continue
            start = max((ec[c] for c in svc.inputs), default=0.0)
            finish = start + svc.qos[name]
            if finish < done.get(sid, math.inf):
                done[sid] = finish
                changed = True
            for c in svc.outputs:
                if done[sid] < ec.get(c, math.inf):
                    ec[c] = done[sid]
                    changed = True

    chosen: set[str] = set()

    def pull(concept: str, requester: str | None) -> None:
        if concept in query.inputs:
            return
        best = min(
            (sid for sid in graph.producers_of(concept) if sid in done and sid != requester),
            key=lambda sid: (done[sid], sid),
        )
        if best in chosen:
            return
        chosen.add(best)
        for c in sorted(graph.nodes[best].inputs):
            pull(c, best)

    for concept in sorted(query.outputs):
        pull(concept, None)
    return chosen


def _extract_bottleneck_optimal(graph: DependencyGraph, name: str) -> set[str]:
    query = graph.query
    bw: dict[str, float] = {c: math.inf for c in query.inputs}
    svc_bw: dict[str, float] = {}
    changed = True
    while changed:
        changed = False
        for sid in sorted(graph.nodes):
            svc = graph.nodes[sid]
            if not all(c in bw for c in svc.inputs):
                continue
            through = min((bw[c] for c in svc.inputs), default=math.inf)
            value = min(through, svc.qos[name])
            if value > svc_bw.get(sid, -math.inf):
                svc_bw[sid] = value
                changed = True
            for c in svc.outputs:
                if svc_bw[sid] > bw.get(c, -math.inf):
                    bw[c] = svc_bw[sid]
                    changed = True

    chosen: set[str] = set()

    def pull(concept: str, requester: str | None) -> None:
        if concept in query.inputs:
            return
        best = min(
            (sid for sid in graph.producers_of(concept) if sid in svc_bw and sid != requester),
            key=lambda sid: (-svc_bw[sid], sid),
        )
        if best in chosen:
            return
        chosen.add(best)
        for c in sorted(graph.nodes[best].inputs):
            pull(c, best)

    for concept in sorted(query.outputs):
        pull(concept, None)
    return chosen


def _exact_search_single(
    graph: DependencyGraph, param: QoSParam, registry: Sequence[QoSParam]
) -> Solution:
    """A* over partial covers; admissible floors make the first goal optimal."""
    query = graph.query
    maximize = param.monotonicity == "positive"

    def floor_key(chosen: frozenset[str]) -> float:
        values = [graph.nodes[sid].qos[param.name] for sid in chosen]
        if param.seq_agg == "sum" and param.par_agg == "max":
            lb = max(values, default=0.0)
        else:
            lb = param.fold(values)
        return -lb if maximize else lb

    heap: list = []
    counter = 0

    def push(key, exact, pending, chosen):
        nonlocal counter
        counter += 1
        heapq.heappush(heap, (key, len(chosen), tuple(sorted(chosen)), counter, exact, pending, chosen))

    push(floor_key(frozenset()), False, frozenset(query.outputs - query.inputs), frozenset())
    seen: set[tuple[frozenset[str], frozenset[str]]] = set()
    while heap:
        key, _, _, _, exact, pending, chosen = heapq.heappop(heap)
        if not pending:
            sol = make_solution(graph, sorted(chosen), registry)
            if sol is None:
                continue
            if not exact:
                value = sol.qos[param.name]
                push(-value if maximize else value, True, pending, chosen)
                continue
            return sol
        state = (pending, chosen)
        if state in seen:
            continue
        seen.add(state)
        concept = min(pending)
        for sid in graph.producers_of(concept):
            if sid in chosen:
                continue
            new_chosen = chosen | {sid}
            covered = set(query.inputs)
            for cid in new_chosen:
                covered |= graph.nodes[cid].outputs
            new_pending = frozenset(
                (set(pending) | set(graph.nodes[sid].inputs)) - covered
            )
            push(floor_key(new_chosen), False, new_pending, new_chosen)
    return infeasible_solution(graph.level)


def _greedy_cover(
    graph: DependencyGraph, param: QoSParam, registry: Sequence[QoSParam]
) -> Solution:
    query = graph.query

    def weight(svc) -> float:
        v = svc.qos[param.name]
        if param.laxity_kind == "multiplicative":
            return -math.log(v) if v > 0 else math.inf
        return v if param.monotonicity == "negative" else 1.0

    pending = set(query.outputs) - set(query.inputs)
    chosen: set[str] = set()
    covered = set(query.inputs)
    while pending:
        candidates = [
            sid
            for sid in sorted(graph.nodes)
            if sid not in chosen and graph.nodes[sid].outputs & pending
        ]
        if not candidates:
            return infeasible_solution(graph.level)
        best = min(
            candidates,
            key=lambda sid: (
                weight(graph.nodes[sid]) / len(graph.nodes[sid].outputs & pending),
                sid,
            ),
        )
        chosen.add(best)
        covered |= graph.nodes[best].outputs
        pending |= set(graph.nodes[best].inputs)
        pending -= covered | set(query.inputs)

    # Drop redundant picks, costliest first.
    for sid in sorted(chosen, key=lambda s: (-weight(graph.nodes[s]), s)):
        trial = {c: graph.nodes[c] for c in chosen if c != sid}
        if layer_services(trial, query.inputs) is None:
            continue
        produced = set(query.inputs)
        for svc in trial.values():
            produced |= svc.outputs
        if set(query.outputs) <= produced:
            chosen.discard(sid)

    sol = make_solution(graph, sorted(chosen), registry, optimal=False)
    if sol is None:
        # Greedy picks dead-locked on a cyclic dependency; take any valid
        # cover instead.
        sol = _exact_search_single(graph, param, registry)
        sol.optimal = False
    return sol


def format_solution(sol: Solution) -> str:
    lines = [
        f"level: {sol.level}",
        f"feasible: {str(sol.feasible).lower()}",
        f"satisfied: {str(sol.satisfied).lower() if sol.satisfied is not None else 'n/a'}",
        f"chosen: {', '.join(sol.chosen) if sol.chosen else '(none)'}",
    ]
    for e in sol.wiring:
        lines.append(f"edge {e.src} -> {e.dst} | {', '.join(sorted(e.concepts))}")
    for name in sorted(sol.qos):
        lines.append(f"qos {name} = {sol.qos[name]!r}")
    if sol.violated:
        lines.append(f"violated: {', '.join(sol.violated)}")
    return "\n".join(lines) + "\n"
