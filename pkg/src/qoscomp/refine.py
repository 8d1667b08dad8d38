"""Solution refinement: spend slack on satisfied bounds to close violations.

When a composed solution violates some bounds, each abstract node standing
for several services can swap in a member whose vector keeps every satisfied
bound within its laxity while improving the violated ones (levels 1 and 2),
or shed members/subgraph services the query never uses (levels 3 and 4).
If that fails, the query is re-solved one level down; recursing to the
concrete level guarantees no satisfying solution is ever missed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .abstraction import Hierarchy, aggregate_parallel, closure_qos
from .compose import (
    Solution,
    aggregate_qos,
    all_feasible,
    build_wiring,
    classify,
    constrained_multi,
    infeasible_solution,
    layer_services,
    make_solution,
    validate_solution,
)
from .graph import build_graph, eliminate_subservices
from .repository import (
    ADDITIVE,
    NEGATIVE,
    POSITIVE,
    QoSParam,
    Query,
    ValidationError,
)
from .abstraction import class_extremes, normalize

Trace = list


class ContractError(ValueError):
    """An operation was called outside its satisfied/violated precondition."""


def laxity(bound: float, achieved: float, param: QoSParam) -> float:
    """Slack left on a satisfied bound."""
    if not param.better_or_equal(achieved, bound):
        raise ContractError(f"laxity: {param.name} bound {bound} is violated by {achieved}")
    if param.laxity_kind == ADDITIVE:
        return bound - achieved if param.monotonicity == NEGATIVE else achieved - bound
    return bound / achieved


def violation_gap(bound: float, achieved: float, param: QoSParam) -> float:
    """How far a violated bound was missed."""
    if param.better_or_equal(achieved, bound):
        raise ContractError(f"violation_gap: {param.name} bound {bound} is satisfied")
    if param.laxity_kind == ADDITIVE:
        return achieved - bound if param.monotonicity == NEGATIVE else bound - achieved
    return achieved / bound


def relax(value: float, eps: float, param: QoSParam) -> float:
    """Worsen a value by up to the given laxity."""
    if param.laxity_kind == ADDITIVE:
        return value + eps if param.monotonicity == NEGATIVE else value - eps
    return value * eps


def zero_laxity(param: QoSParam) -> float:
    return 0.0 if param.laxity_kind == ADDITIVE else 1.0


def gain(
    candidate: Mapping[str, float],
    incumbent: Mapping[str, float],
    violated: Sequence[str],
    params: Mapping[str, QoSParam],
    extremes: Mapping[str, tuple[float, float]],
) -> float:
    """Summed normalized improvement over the violated parameters."""
    total = 0.0
    for name in violated:
        p = params[name]
        lo, hi = extremes[name]
        total += normalize(candidate[name], p, lo, hi) - normalize(incumbent[name], p, lo, hi)
    return total


@dataclass
class RefinementContext:
    bounds: dict[str, float]
    satisfied: tuple[str, ...]
    violated: tuple[str, ...]
    laxities: dict[str, float]
    gaps: dict[str, float]

    @classmethod
    def from_solution(
        cls,
        qos: Mapping[str, float],
        bounds: Mapping[str, float],
        registry: Sequence[QoSParam],
    ) -> "RefinementContext":
        params = {p.name: p for p in registry}
        satisfied, violated = [], []
        laxities, gaps = {}, {}
        for name in sorted(bounds):
            p = params[name]
            if p.better_or_equal(qos[name], bounds[name]):
                satisfied.append(name)
                laxities[name] = laxity(bounds[name], qos[name], p)
            else:
                violated.append(name)
                gaps[name] = violation_gap(bounds[name], qos[name], p)
        return cls(dict(bounds), tuple(satisfied), tuple(violated), laxities, gaps)


def update_node_qos(
    member_vectors: Mapping[str, Mapping[str, float]],
    incumbent: str,
    ctx: RefinementContext,
    registry: Sequence[QoSParam],
    allowed: set[str] | None = None,
) -> str | None:
    """Pick the member that best closes the violation gaps.

    Candidates must stay within the relaxed values on every satisfied bound
    and be at least as good as the incumbent on every violated one; among
    them the one with the largest normalized gain wins (ties to the smallest
    id). Returns None when no member beats the incumbent.
    """
    params = {p.name: p for p in registry}
    inc_vec = member_vectors[incumbent]
    relaxed = {
        name: relax(inc_vec[name], ctx.laxities[name], params[name])
        for name in ctx.satisfied
    }
    candidates = []
    for mid in sorted(member_vectors):
        if allowed is not None and mid not in allowed:
            continue
        vec = member_vectors[mid]
        if all(params[n].better_or_equal(vec[n], relaxed[n]) for n in ctx.satisfied) and all(
            params[n].better_or_equal(vec[n], inc_vec[n]) for n in ctx.violated
        ):
            candidates.append(mid)
    if not candidates:
        return None
    extremes = {
        name: (
            min(v[name] for v in member_vectors.values()),
            max(v[name] for v in member_vectors.values()),
        )
        for name in params
    }
    best = min(
        candidates,
        key=lambda mid: (
            -gain(member_vectors[mid], inc_vec, ctx.violated, params, extremes),
            mid,
        ),
    )
    return None if best == incumbent else best


def refine_qos(
    solution: Solution,
    hierarchy: Hierarchy,
    query: Query,
    trace: Trace | None = None,
) -> tuple[Solution | None, int]:
    """One refinement sweep at the solution's level.

    On success the returned solution is expressed one level down with its QoS
    recomputed; on failure returns (None, passes). A solution that already
    satisfies every bound comes back unchanged.
    """
    level = solution.level
    if not 1 <= level <= 4:
        raise ValidationError("QoS refinement applies to abstract levels 1..4")
    registry = hierarchy.repository.registry
    bounds = dict(query.bounds)
    work = solution.clone()
    ctx = RefinementContext.from_solution(work.qos, bounds, registry)
    if not ctx.violated:
        return solution, 0

    def current_members(nid: str) -> tuple[str, ...]:
        return work.node_members.get(nid, hierarchy.members(level, nid))

    nodes = [nid for nid in work.chosen if len(current_members(nid)) > 1]
    nodes.sort(key=lambda nid: (-len(current_members(nid)), nid))
    passes = 0
    for nid in nodes:
        changed = False
        if level in (1, 2):
            changed = _swap_member(work, nid, level, hierarchy, query, ctx, trace)
        elif level == 3:
            changed = _drop_unused_members(work, nid, hierarchy, trace)
        else:
            changed = _drop_redundant_services(work, nid, hierarchy, trace)
        if changed:
            passes += 1
            work.qos = aggregate_qos(work, registry)
            ctx = RefinementContext.from_solution(work.qos, bounds, registry)
            if trace is not None:
                trace.append(
                    f"refine level={level} node={nid} qos={_fmt_vec(work.qos)} "
                    f"laxities={_fmt_vec(ctx.laxities)} gaps={_fmt_vec(ctx.gaps)}"
                )
            if not ctx.violated:
                break
    if ctx.violated:
        return None, passes
    lowered = _express_down(work, hierarchy, query)
    if lowered is None or (lowered.satisfied is False):
        return None, passes
    return lowered, passes


def _fmt_vec(vec: Mapping[str, float]) -> str:
    return "{" + ", ".join(f"{k}={vec[k]:g}" for k in sorted(vec)) + "}"


def _swap_member(work, nid, level, hierarchy, query, ctx, trace) -> bool:
    members = work.node_members.get(nid, hierarchy.members(level, nid))
    below = hierarchy.by_id[level - 1]
    member_vectors = {mid: dict(below[mid].qos) for mid in members}
    node = hierarchy.by_id[level][nid]
    incumbent = work.node_pick.get(
        nid, node.representative if node.representative else members[0]
    )
    allowed = None
    if level == 2:
        # Only members whose inputs are available where this node sits.
        chosen_map = {cid: hierarchy.by_id[level][cid] for cid in work.chosen}
        waves = layer_services(chosen_map, query.inputs)
        available = set(query.inputs)
        for cid in work.chosen:
            if waves[cid] < waves[nid]:
                available |= chosen_map[cid].outputs
        allowed = {mid for mid in members if below[mid].inputs <= available}
    chosen = update_node_qos(member_vectors, incumbent, ctx, hierarchy.repository.registry, allowed)
    if chosen is None:
        return False
    if trace is not None:
        trace.append(
            f"swap level={level} node={nid} incumbent={incumbent} chosen={chosen}"
        )
    work.node_pick[nid] = chosen
    work.node_qos[nid] = dict(member_vectors[chosen])
    return True


def _used_outputs(work: Solution, nid: str) -> set[str]:
    used: set[str] = set()
    for e in work.wiring:
        if e.src == nid:
            used |= e.concepts
    return used


def _drop_unused_members(work, nid, hierarchy: Hierarchy, trace) -> bool:
    members = work.node_members.get(nid, hierarchy.members(3, nid))
    used = _used_outputs(work, nid)
    below = hierarchy.by_id[2]
    keep = tuple(m for m in members if below[m].outputs & used)
    if not keep or keep == tuple(members):
        return False
    if trace is not None:
        dropped = sorted(set(members) - set(keep))
        trace.append(f"drop-unused level=3 node={nid} removed={', '.join(dropped)}")
    work.node_members[nid] = keep
    work.node_qos[nid] = aggregate_parallel(
        [dict(below[m].qos) for m in keep], hierarchy.repository.registry
    )
    return True


def _drop_redundant_services(work, nid, hierarchy: Hierarchy, trace) -> bool:
    node = hierarchy.by_id[4][nid]
    members = work.node_members.get(nid, node.members)
    below = hierarchy.by_id[3]
    used = _used_outputs(work, nid)
    closure = {m: below[m] for m in members}
    waves = layer_services(closure, node.inputs)
    if waves is None:
        return False
    keep: set[str] = set()
    pending = set(used) - set(node.inputs)
    while pending:
        concept = min(pending)
        pending.discard(concept)
        producers = sorted(
            (m for m in members if concept in below[m].outputs and m not in keep),
            key=lambda m: (waves[m], m),
        )
        if not producers:
            if not any(concept in below[m].outputs for m in keep):
                return False  # node cannot supply a concept the solution uses
            continue
        pick = producers[0]
        keep.add(pick)
        pending |= set(below[pick].inputs) - set(node.inputs)
        covered = set(node.inputs)
        for m in keep:
            covered |= below[m].outputs
        pending -= covered
    kept = tuple(sorted(keep))
    if not kept or kept == tuple(members):
        return False
    if trace is not None:
        dropped = sorted(set(members) - set(kept))
        trace.append(f"drop-redundant level=4 node={nid} removed={', '.join(dropped)}")
    work.node_members[nid] = kept
    work.node_qos[nid] = closure_qos(node, kept, below, hierarchy.repository.registry)
    return True


def _express_down(work: Solution, hierarchy: Hierarchy, query: Query) -> Solution | None:
    """Rewrite a refined solution over the services one level below."""
    level = work.level
    below_ids: set[str] = set()
    for nid in work.chosen:
        below_ids |= set(_expand_once(work, nid, level, hierarchy))
    below = hierarchy.by_id[level - 1]
    chosen = {sid: below[sid] for sid in sorted(below_ids)}
    wired = build_wiring(chosen, query)
    if wired is None:
        return None
    edges, _ = wired
    node_qos = {sid: dict(below[sid].qos) for sid in chosen}
    registry = hierarchy.repository.registry
    from .compose import _aggregate

    sol = Solution(
        level=level - 1,
        chosen=tuple(sorted(chosen)),
        wiring=edges,
        qos=_aggregate(node_qos, edges, registry),
        feasible=True,
        node_qos=node_qos,
    )
    classify(sol, query.bounds, registry)
    return sol


def _expand_once(work: Solution, nid: str, level: int, hierarchy: Hierarchy) -> tuple[str, ...]:
    node = hierarchy.by_id[level][nid]
    if level == 1:
        return (work.node_pick.get(nid, node.representative),)
    if level == 2:
        return (work.node_pick.get(nid, node.representative),)
    return work.node_members.get(nid, node.members)


def reconstruct(solution: Solution, hierarchy: Hierarchy, query: Query) -> Solution:
    """Expand an abstract solution down to concrete services (Alg.-style).

    Fused nodes become their dependency subgraphs, input-equivalence nodes
    their member sets, dominance groups their dominant member, equivalence
    classes the member whose QoS labels them. The result is re-wired and its
    QoS recomputed from the concrete vectors.
    """
    if not solution.feasible:
        return solution
    level = solution.level
    ids = set(solution.chosen)
    work = solution
    for lvl in range(level, 0, -1):
        next_ids: set[str] = set()
        for nid in sorted(ids):
            if lvl == level:
                next_ids |= set(_expand_once(work, nid, lvl, hierarchy))
            else:
                node = hierarchy.by_id[lvl][nid]
                if lvl in (1, 2):
                    next_ids.add(node.representative)
                else:
                    next_ids |= set(node.members)
        ids = next_ids
    registry = hierarchy.repository.registry
    concrete = {sid: hierarchy.repository.by_id[sid] for sid in sorted(ids)}
    wired = build_wiring(concrete, query)
    if wired is None:
        raise ValidationError("reconstruction produced an unwirable service set")
    edges, _ = wired
    node_qos = {sid: dict(concrete[sid].qos) for sid in concrete}
    from .compose import _aggregate

    sol = Solution(
        level=0,
        chosen=tuple(sorted(concrete)),
        wiring=edges,
        qos=_aggregate(node_qos, edges, registry),
        feasible=True,
        optimal=solution.optimal,
        truncated=solution.truncated,
        node_qos=node_qos,
    )
    if query.bounds:
        classify(sol, query.bounds, registry)
    return sol


def complete_refinement(
    hierarchy: Hierarchy, level: int, query: Query
) -> Solution:
    """Re-solve the query one level below the failed one."""
    if not 1 <= level <= 4:
        raise ValidationError("complete refinement applies to levels 1..4")
    graph = build_graph(hierarchy, level - 1, query)
    if graph.level == 4:
        graph = eliminate_subservices(graph, hierarchy)
    return constrained_multi(graph, query.bounds, hierarchy.repository.registry)


@dataclass
class OrchestrateResult:
    status: str                      # "satisfied" | "unsatisfiable" | "infeasible"
    solution: Solution | None        # concrete, level 0
    answered_level: int | None
    refine_passes: int
    final_level: int
    best_effort: Solution | None = None
    trace: Trace | None = None


def orchestrate(
    hierarchy: Hierarchy,
    query: Query,
    start_level: int = 4,
    trace: Trace | None = None,
) -> OrchestrateResult:
    """Answer a query: compose at the most abstract level, refine on demand.

    Composition starts at ``start_level``; when bounds are violated a QoS
    refinement sweep runs there, and if that fails the graph is rebuilt one
    level down (complete refinement), all the way to the concrete services.
    The result is always expressed over concrete services.
    """
    registry = hierarchy.repository.registry
    bounds = dict(query.bounds)
    passes_total = 0
    best_effort: Solution | None = None
    for level in range(start_level, -1, -1):
        graph = build_graph(hierarchy, level, query)
        if level == 4:
            graph = eliminate_subservices(graph, hierarchy)
        if not graph.feasible:
            # Feasibility is level-independent: a query unservable here is
            # unservable everywhere.
            return OrchestrateResult("infeasible", None, None, passes_total, level, trace=trace)
        sol = constrained_multi(graph, bounds, registry)
        if not sol.feasible:
            return OrchestrateResult("infeasible", None, None, passes_total, level, trace=trace)
        if sol.satisfied or not bounds:
            concrete = reconstruct(sol, hierarchy, query) if level > 0 else sol
            if not bounds or concrete.satisfied:
                return OrchestrateResult(
                    "satisfied", concrete, level, passes_total, level, trace=trace
                )
        best_effort = sol
        if level == 0:
            return OrchestrateResult(
                "unsatisfiable", None, None, passes_total, 0, best_effort=sol, trace=trace
            )
        if level == 1 and len(bounds) <= 1:
            # A single bounded parameter survives equivalence abstraction
            # unchanged, so member swaps cannot help.
            continue
        refined, passes = refine_qos(sol, hierarchy, query, trace)
        passes_total += passes
        if refined is not None and refined.satisfied:
            concrete = (
                reconstruct(refined, hierarchy, query) if refined.level > 0 else refined
            )
            if concrete.satisfied:
                return OrchestrateResult(
                    "satisfied", concrete, level, passes_total, refined.level, trace=trace
                )
    return OrchestrateResult(
        "unsatisfiable", None, None, passes_total, 0, best_effort=best_effort, trace=trace
    )
