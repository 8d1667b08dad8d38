"""Four-level abstraction hierarchy built over a service repository.

Level 1 merges services with identical input and output sets and labels each
class with the QoS vector of a best-representative member. Level 2 groups each
undominated service with every service it functionally dominates. Level 3
merges input-equivalent services, unioning their outputs and aggregating QoS
with the parallel rules. Level 4 fuses each service with everything it can
transitively activate, so a single node stands for a whole executable
subgraph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .repository import (
    FormatError,
    QoSParam,
    Repository,
    Service,
    ValidationError,
    _iter_lines,
)

Extremes = Mapping[str, tuple[float, float]]


@dataclass(frozen=True)
class AbstractService:
    id: str
    level: int
    inputs: frozenset[str]
    outputs: frozenset[str]
    members: tuple[str, ...]              # previous-level ids, sorted
    qos: Mapping[str, float]
    representative: str | None = None     # member whose QoS was adopted (levels 1-2)

    def value(self, param: str) -> float:
        return self.qos[param]


def _base(sid: str) -> str:
    return sid.split(":", 1)[1] if ":" in sid else sid


def _abstract_id(level: int, anchor: str) -> str:
    return f"{level}:{_base(anchor)}"


# --- level 1: input/output equivalence --------------------------------------


def equivalence_partition(services: Sequence[Service | AbstractService]) -> list[list]:
    """Partition services into classes with identical input AND output sets.

    Classes come back ordered by their smallest member id; members in id order.
    """
    buckets: dict[tuple[frozenset[str], frozenset[str]], list] = {}
    for svc in services:
        buckets.setdefault((svc.inputs, svc.outputs), []).append(svc)
    classes = [sorted(group, key=lambda s: s.id) for group in buckets.values()]
    classes.sort(key=lambda group: group[0].id)
    return classes


def normalize(value: float, param: QoSParam, lo: float, hi: float) -> float:
    """Scale a value into [0, 1] so that 1 is always the best achievable.

    Degenerate ranges (lo == hi) normalize to 1.
    """
    if lo > hi:
        raise ValidationError(f"normalize: empty range [{lo}, {hi}] for {param.name}")
    if not lo <= value <= hi:
        raise ValidationError(
            f"normalize: {param.name}={value} outside [{lo}, {hi}]"
        )
    if lo == hi:
        return 1.0
    if param.monotonicity == "positive":
        return (value - lo) / (hi - lo)
    return (hi - value) / (hi - lo)


def deviation(nv: float) -> float:
    """Distance from the best normalized value."""
    return 1.0 - nv


def class_extremes(members: Sequence[Service | AbstractService], registry) -> dict[str, tuple[float, float]]:
    out: dict[str, tuple[float, float]] = {}
    for param in registry:
        values = [m.qos[param.name] for m in members]
        out[param.name] = (min(values), max(values))
    return out


def deviation_profile(
    svc, registry: Sequence[QoSParam], extremes: Extremes
) -> tuple[float, ...]:
    """Per-parameter deviations, sorted descending (worst first)."""
    devs = [
        deviation(normalize(svc.qos[p.name], p, *extremes[p.name])) for p in registry
    ]
    return tuple(sorted(devs, reverse=True))


def best_representative(
    members: Sequence[Service | AbstractService],
    registry: Sequence[QoSParam],
    extremes: Extremes | None = None,
) -> str:
    """Pick the member whose worst normalized deviation is smallest.

    A member that is best on every parameter wins outright. Ties on the worst
    deviation are broken by the second worst, then the third, and finally by
    the smallest id. ``extremes`` overrides the class-local min/max per
    parameter (it must still cover every member value).
    """
    if not members:
        raise ValidationError("best_representative: empty class")
    members = sorted(members, key=lambda s: s.id)
    for m in members:
        if all(
            p.better_or_equal(m.qos[p.name], other.qos[p.name])
            for p in registry
            for other in members
        ):
            return m.id
    if extremes is None:
        extremes = class_extremes(members, registry)
    return min(members, key=lambda m: (deviation_profile(m, registry, extremes), m.id)).id


def abstract_level1(repo: Repository) -> list[AbstractService]:
    out = []
    for group in equivalence_partition(repo.services):
        rep = best_representative(group, repo.registry)
        rep_svc = next(m for m in group if m.id == rep)
        out.append(
            AbstractService(
                id=_abstract_id(1, group[0].id),
                level=1,
                inputs=group[0].inputs,
                outputs=group[0].outputs,
                members=tuple(m.id for m in group),
                qos=dict(rep_svc.qos),
                representative=rep,
            )
        )
    return out


# --- level 2: functional dominance ------------------------------------------


def dominates(a, b) -> bool:
    """True when ``a`` needs no more inputs than ``b`` and yields no fewer outputs."""
    return a.inputs <= b.inputs and a.outputs >= b.outputs


def abstract_level2(level1: Sequence[AbstractService]) -> list[AbstractService]:
    services = sorted(level1, key=lambda s: s.id)
    for a in services:
        for b in services:
            if a.id != b.id and a.inputs == b.inputs and a.outputs == b.outputs:
                raise ValidationError(
                    "level 2 expects equivalent services already merged"
                )
    dominated = {
        b.id
        for b in services
        if any(a.id != b.id and dominates(a, b) for a in services)
    }
    out = []
    for seed in services:
        if seed.id in dominated:
            continue
        group = [seed] + [
            s for s in services if s.id != seed.id and dominates(seed, s)
        ]
        out.append(
            AbstractService(
                id=_abstract_id(2, seed.id),
                level=2,
                inputs=seed.inputs,
                outputs=seed.outputs,
                members=tuple(sorted(m.id for m in group)),
                qos=dict(seed.qos),
                representative=seed.id,
            )
        )
    out.sort(key=lambda s: s.id)
    return out


# --- level 3: input equivalence ----------------------------------------------


def abstract_level3(
    level2: Sequence[AbstractService], registry: Sequence[QoSParam]
) -> list[AbstractService]:
    buckets: dict[frozenset[str], list[AbstractService]] = {}
    for svc in level2:
        buckets.setdefault(svc.inputs, []).append(svc)
    out = []
    for inputs, group in buckets.items():
        group.sort(key=lambda s: s.id)
        outputs = frozenset().union(*(m.outputs for m in group))
        qos = aggregate_parallel([m.qos for m in group], registry)
        out.append(
            AbstractService(
                id=_abstract_id(3, group[0].id),
                level=3,
                inputs=inputs,
                outputs=outputs,
                members=tuple(m.id for m in group),
                qos=qos,
            )
        )
    out.sort(key=lambda s: s.id)
    return out


def aggregate_parallel(
    vectors: Sequence[Mapping[str, float]], registry: Sequence[QoSParam]
) -> dict[str, float]:
    """Aggregate co-activated services by each parameter's parallel rule."""
    return {p.name: p.fold(v[p.name] for v in vectors) for p in registry}


# --- level 4: fusion ----------------------------------------------------------


def fusion_closure(
    seed: AbstractService,
    by_id: Mapping[str, AbstractService],
    memo: dict[str, tuple[str, ...]] | None = None,
) -> tuple[str, ...]:
    """Seed plus every service transitively activatable from its inputs.

    The activation pool starts at the seed's inputs and grows with the
    outputs of everything absorbed, to a fixpoint. ``memo`` caches finished
    closures; an activated service whose closure is already known is merged
    wholesale (its members are all activatable from its own trigger).
    """
    if memo is not None and seed.id in memo:
        return memo[seed.id]
    members = {seed.id}
    pool = set(seed.inputs) | set(seed.outputs)
    order = sorted(by_id)
    changed = True
    while changed:
        changed = False
        for sid in order:
            if sid in members:
                continue
            svc = by_id[sid]
            if svc.inputs <= pool:
                absorbed = memo.get(sid, (sid,)) if memo is not None else (sid,)
                for m in absorbed:
                    if m not in members:
                        members.add(m)
                        pool |= by_id[m].outputs
                changed = True
    closure = tuple(sorted(members))
    if memo is not None:
        memo[seed.id] = closure
    return closure


def closure_qos(
    seed: AbstractService,
    member_ids: Sequence[str],
    by_id: Mapping[str, AbstractService],
    registry: Sequence[QoSParam],
) -> dict[str, float]:
    """QoS of executing the whole fused subgraph.

    Chain-aggregated parameters (seq rule differs from the parallel one, i.e.
    response time) take the longest activation chain; everything else folds
    over the member set.
    """
    members = [by_id[m] for m in member_ids]
    qos: dict[str, float] = {}
    chain = _chain_completion(seed, members)
    for p in registry:
        if p.seq_agg == "sum" and p.par_agg == "max":
            qos[p.name] = chain[p.name]
        else:
            qos[p.name] = p.fold(m.qos[p.name] for m in members)
    return qos


def _chain_completion(seed, members) -> dict[str, float]:
    """Critical-chain value per sum/max parameter over an activation DAG."""
    available = set(seed.inputs)
    done: dict[str, dict[str, float]] = {}
    params = [p for p in seed.qos]
    waves: list[list] = []
    remaining = sorted(members, key=lambda s: s.id)
    while remaining:
        ready = [s for s in remaining if s.inputs <= available]
        if not ready:
            break
        waves.append(ready)
        for s in ready:
            available |= s.outputs
        remaining = [s for s in remaining if s not in ready]
    concept_done: dict[str, dict[str, float]] = {}
    result = {name: 0.0 for name in params}
    for wave in waves:
        for svc in wave:
            start = {name: 0.0 for name in params}
            for c in svc.inputs:
                if c in concept_done:
                    for name in params:
                        start[name] = max(start[name], concept_done[c][name])
            finish = {name: start[name] + svc.qos[name] for name in params}
            done[svc.id] = finish
            for name in params:
                result[name] = max(result[name], finish[name])
        for svc in wave:
            for c in svc.outputs:
                prev = concept_done.get(c)
                if prev is None:
                    concept_done[c] = dict(done[svc.id])
                else:
                    for name in params:
                        prev[name] = min(prev[name], done[svc.id][name])
    return result


def abstract_level4(
    level3: Sequence[AbstractService], registry: Sequence[QoSParam]
) -> list[AbstractService]:
    by_id = {s.id: s for s in level3}
    memo: dict[str, tuple[str, ...]] = {}
    out = []
    for seed in sorted(level3, key=lambda s: s.id):
        members = fusion_closure(seed, by_id, memo)
        outputs = frozenset().union(*(by_id[m].outputs for m in members))
        out.append(
            AbstractService(
                id=_abstract_id(4, seed.id),
                level=4,
                inputs=seed.inputs,
                outputs=outputs,
                members=members,
                qos=closure_qos(seed, members, by_id, registry),
            )
        )
    return out


# --- the hierarchy ------------------------------------------------------------


class Hierarchy:
    """The five service layers (level 0 = concrete) with their member maps."""

    def __init__(self, repo: Repository):
        self.repository = repo
        level1 = abstract_level1(repo)
        level2 = abstract_level2(level1)
        level3 = abstract_level3(level2, repo.registry)
        level4 = abstract_level4(level3, repo.registry)
        self.levels: tuple[tuple, ...] = (
            repo.services,
            tuple(level1),
            tuple(level2),
            tuple(level3),
            tuple(level4),
        )
        self.by_id: tuple[dict, ...] = tuple(
            {s.id: s for s in level} for level in self.levels
        )

    def services_at(self, level: int):
        return self.levels[level]

    def counts(self) -> tuple[int, ...]:
        return tuple(len(level) for level in self.levels)

    def members(self, level: int, sid: str) -> tuple[str, ...]:
        if level == 0:
            raise ValidationError("level 0 services have no members")
        return self.by_id[level][sid].members

    def seed_of(self, level4_id: str) -> str:
        """The level-3 service a fused service grew from."""
        return "3:" + _base(level4_id)


def build_hierarchy(repo: Repository) -> Hierarchy:
    return Hierarchy(repo)


# --- hierarchy export ----------------------------------------------------------


def format_hierarchy(h: Hierarchy) -> str:
    lines = []
    for level in range(1, 5):
        lines.append(f"[level {level}]")
        for svc in h.levels[level]:
            parts = [
                svc.id,
                f"in: {', '.join(sorted(svc.inputs))}",
                f"out: {', '.join(sorted(svc.outputs))}",
                "qos: " + ", ".join(f"{k}={svc.qos[k]!r}" for k in sorted(svc.qos)),
                f"members: {', '.join(svc.members)}",
            ]
            if svc.representative is not None:
                parts.append(f"representative: {svc.representative}")
            lines.append(" | ".join(parts))
        lines.append("")
    return "\n".join(lines) + "\n" if lines else ""


def save_hierarchy(h: Hierarchy, path: str | Path) -> None:
    Path(path).write_text(format_hierarchy(h), encoding="utf-8")


def parse_hierarchy(text: str, repo: Repository) -> Hierarchy:
    """Rebuild a hierarchy from its export, verifying it matches ``repo``."""
    h = Hierarchy.__new__(Hierarchy)
    h.repository = repo
    levels: dict[int, list[AbstractService]] = {1: [], 2: [], 3: [], 4: []}
    current: int | None = None
    for lineno, line in _iter_lines(text):
        if line.startswith("[") and line.endswith("]"):
            tag = line[1:-1].split()
            if len(tag) != 2 or tag[0] != "level":
                raise FormatError(f"bad section {line!r}", lineno)
            current = int(tag[1])
            if current not in levels:
                raise FormatError(f"bad level {current}", lineno)
            continue
        if current is None:
            raise FormatError("content before any [level N] section", lineno)
        fields = [f.strip() for f in line.split("|")]
        sid = fields[0]
        data: dict[str, str] = {}
        for f in fields[1:]:
            key, _, rest = f.partition(":")
            data[key.strip()] = rest.strip()
        qos = {}
        for piece in data.get("qos", "").split(","):
            piece = piece.strip()
            if piece:
                name, _, value = piece.partition("=")
                qos[name.strip()] = float(value)
        rep = data.get("representative") or None
        levels[current].append(
            AbstractService(
                id=sid,
                level=current,
                inputs=frozenset(c.strip() for c in data["in"].split(",") if c.strip()),
                outputs=frozenset(c.strip() for c in data["out"].split(",") if c.strip()),
                members=tuple(m.strip() for m in data["members"].split(",") if m.strip()),
                qos=qos,
                representative=rep,
            )
        )
    h.levels = (
        repo.services,
        tuple(levels[1]),
        tuple(levels[2]),
        tuple(levels[3]),
        tuple(levels[4]),
    )
    h.by_id = tuple({s.id: s for s in level} for level in h.levels)
    return h


def load_hierarchy(path: str | Path, repo: Repository) -> Hierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"), repo)
