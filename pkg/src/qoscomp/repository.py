"""Service repository model: concepts, QoS parameter registry, services, queries.

The canonical on-disk format is a plain UTF-8 text file with three sections:

    [concepts]
    concept-id: alias, alias, ...

    [qos]
    name monotonicity seq-agg par-agg laxity-kind

    [services]
    id | in: c1, c2 | out: c3 | qos: name=value, name=value

Query files use three line kinds::

    in: name, name, ...
    out: name, ...
    bound: qos-name=value

Lines starting with ``#`` and blank lines are ignored everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

POSITIVE = "positive"
NEGATIVE = "negative"
ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"
AGGREGATIONS = ("sum", "max", "min", "product", "count")


class RepositoryError(ValueError):
    """Base class for repository model errors."""


class FormatError(RepositoryError):
    """Malformed repository/query file. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ValidationError(RepositoryError):
    """A repository violates a structural invariant."""


class ResolutionError(RepositoryError):
    """A raw parameter name does not resolve to any concept."""


@dataclass(frozen=True)
class QoSParam:
    """Semantics of one QoS parameter.

    ``monotonicity`` says whether higher values are better (``positive``,
    e.g. reliability) or worse (``negative``, e.g. response time).
    ``seq_agg``/``par_agg`` give the aggregation rule along a chain and
    across parallel branches. ``laxity_kind`` selects additive slack
    (times, costs, counts) or multiplicative slack (probability-like
    parameters, which must lie in (0, 1]).
    """

    name: str
    monotonicity: str
    seq_agg: str
    par_agg: str
    laxity_kind: str

    def __post_init__(self):
        if self.monotonicity not in (POSITIVE, NEGATIVE):
            raise ValidationError(f"bad monotonicity {self.monotonicity!r} for {self.name}")
        if self.seq_agg not in AGGREGATIONS or self.par_agg not in AGGREGATIONS:
            raise ValidationError(f"bad aggregation for {self.name}")
        if self.laxity_kind not in (ADDITIVE, MULTIPLICATIVE):
            raise ValidationError(f"bad laxity kind {self.laxity_kind!r} for {self.name}")

    def better_or_equal(self, a: float, b: float) -> bool:
        """True when value ``a`` is at least as good as ``b``."""
        return a >= b if self.monotonicity == POSITIVE else a <= b

    def best(self, values: Iterable[float]) -> float:
        return max(values) if self.monotonicity == POSITIVE else min(values)

    def worst(self, values: Iterable[float]) -> float:
        return min(values) if self.monotonicity == POSITIVE else max(values)

    def fold_identity(self) -> float:
        agg = self.par_agg
        if agg in ("sum", "count"):
            return 0.0
        if agg == "product":
            return 1.0
        if agg == "min":
            return math.inf
        return -math.inf  # max

    def fold(self, values: Iterable[float]) -> float:
        """Whole-set aggregation by the parallel rule.

        Values are folded in sorted order so the result is independent of
        input ordering (bitwise, not just mathematically).
        """
        vals = sorted(values)
        if not vals:
            return self.fold_identity()
        agg = self.par_agg
        if agg in ("sum", "count"):
            return math.fsum(vals)
        if agg == "product":
            out = 1.0
            for v in vals:
                out *= v
            return out
        if agg == "min":
            return vals[0]
        return vals[-1]


def default_registry() -> tuple[QoSParam, ...]:
    """The stock parameter set used by the generator and demo datasets."""
    return (
        QoSParam("response-time", NEGATIVE, "sum", "max", ADDITIVE),
        QoSParam("throughput", POSITIVE, "min", "min", ADDITIVE),
        QoSParam("reliability", POSITIVE, "product", "product", MULTIPLICATIVE),
        QoSParam("availability", POSITIVE, "product", "product", MULTIPLICATIVE),
        QoSParam("invocation-cost", NEGATIVE, "sum", "sum", ADDITIVE),
        QoSParam("invocation-count", NEGATIVE, "count", "count", ADDITIVE),
    )


@dataclass(frozen=True)
class Concept:
    """Ontology node; ``aliases`` are raw names that map onto it."""

    id: str
    aliases: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Service:
    id: str
    inputs: frozenset[str]
    outputs: frozenset[str]
    qos: Mapping[str, float]

    def value(self, param: str) -> float:
        return self.qos[param]


@dataclass(frozen=True)
class Query:
    inputs: frozenset[str]
    outputs: frozenset[str]
    bounds: Mapping[str, float] = field(default_factory=dict)


class Repository:
    """Immutable, validated set of services plus ontology and QoS registry."""

    def __init__(
        self,
        services: Iterable[Service],
        concepts: Iterable[Concept],
        registry: Iterable[QoSParam],
    ):
        self.services: tuple[Service, ...] = tuple(sorted(services, key=lambda s: s.id))
        self.concepts: tuple[Concept, ...] = tuple(sorted(concepts, key=lambda c: c.id))
        self.registry: tuple[QoSParam, ...] = tuple(registry)
        self.by_id: dict[str, Service] = {s.id: s for s in self.services}
        self.params: dict[str, QoSParam] = {p.name: p for p in self.registry}
        self._alias_map: dict[str, str] = {}
        for concept in self.concepts:
            for name in {concept.id, *concept.aliases}:
                self._alias_map.setdefault(name, concept.id)
        self.validate()

    def __len__(self) -> int:
        return len(self.services)

    def validate(self) -> None:
        seen_names: dict[str, str] = {}
        for concept in self.concepts:
            for name in {concept.id, *concept.aliases}:
                owner = seen_names.get(name)
                if owner is not None and owner != concept.id:
                    raise ValidationError(
                        f"alias {name!r} claimed by both {owner!r} and {concept.id!r}"
                    )
                seen_names[name] = concept.id
        if len(self.by_id) != len(self.services):
            ids = [s.id for s in self.services]
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate service id(s): {', '.join(dup)}")
        if len(self.params) != len(self.registry):
            raise ValidationError("duplicate QoS parameter name in registry")
        known = {c.id for c in self.concepts}
        for svc in self.services:
            if svc.id.startswith("@"):
                raise ValidationError(f"service id {svc.id!r} may not start with '@'")
            if not svc.inputs or not svc.outputs:
                raise ValidationError(f"service {svc.id}: inputs and outputs must be nonempty")
            for cid in svc.inputs | svc.outputs:
                if cid not in known:
                    raise ValidationError(f"service {svc.id}: unknown concept {cid!r}")
            if set(svc.qos) != set(self.params):
                raise ValidationError(
                    f"service {svc.id}: QoS vector must cover exactly the registry"
                )
            for name, value in svc.qos.items():
                param = self.params[name]
                if param.laxity_kind == MULTIPLICATIVE and not 0.0 < value <= 1.0:
                    raise ValidationError(
                        f"service {svc.id}: {name}={value} outside (0, 1]"
                    )
                if param.laxity_kind == ADDITIVE and value < 0.0:
                    raise ValidationError(f"service {svc.id}: {name}={value} negative")

    def resolve(self, name: str) -> str:
        """Map a raw parameter name to its concept id (exact alias lookup)."""
        try:
            return self._alias_map[name]
        except KeyError:
            raise ResolutionError(f"unknown concept or alias {name!r}") from None

    def resolve_all(self, names: Iterable[str]) -> frozenset[str]:
        return frozenset(self.resolve(n) for n in names)


# --- file I/O ---------------------------------------------------------------


def _iter_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def parse_repository(text: str) -> Repository:
    concepts: list[Concept] = []
    registry: list[QoSParam] = []
    services: list[Service] = []
    section = None
    for lineno, line in _iter_lines(text):
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("concepts", "qos", "services"):
                raise FormatError(f"unknown section [{section}]", lineno)
            continue
        if section == "concepts":
            if ":" in line:
                cid, _, rest = line.partition(":")
                aliases = frozenset(a.strip() for a in rest.split(",") if a.strip())
            else:
                cid, aliases = line, frozenset()
            concepts.append(Concept(cid.strip(), aliases))
        elif section == "qos":
            parts = line.split()
            if len(parts) != 5:
                raise FormatError("expected: name monotonicity seq-agg par-agg laxity-kind", lineno)
            try:
                registry.append(QoSParam(*parts))
            except ValidationError as exc:
                raise FormatError(str(exc), lineno) from None
        elif section == "services":
            services.append(_parse_service(line, lineno))
        else:
            raise FormatError("content before any section header", lineno)
    try:
        return Repository(services, concepts, registry)
    except ValidationError:
        raise


def _parse_service(line: str, lineno: int) -> Service:
    fields = [f.strip() for f in line.split("|")]
    if len(fields) != 4:
        raise FormatError("expected: id | in: ... | out: ... | qos: ...", lineno)
    sid = fields[0]
    parsed: dict[str, str] = {}
    for f in fields[1:]:
        key, sep, rest = f.partition(":")
        if not sep:
            raise FormatError(f"malformed field {f!r}", lineno)
        parsed[key.strip().lower()] = rest.strip()
    if set(parsed) != {"in", "out", "qos"}:
        raise FormatError("service needs in:, out: and qos: fields", lineno)
    inputs = frozenset(c.strip() for c in parsed["in"].split(",") if c.strip())
    outputs = frozenset(c.strip() for c in parsed["out"].split(",") if c.strip())
    qos: dict[str, float] = {}
    for piece in parsed["qos"].split(","):
        piece = piece.strip()
        if not piece:
            continue
        name, sep, value = piece.partition("=")
        if not sep:
            raise FormatError(f"malformed qos entry {piece!r}", lineno)
        try:
            qos[name.strip()] = float(value)
        except ValueError:
            raise FormatError(f"bad number in {piece!r}", lineno) from None
    return Service(sid, inputs, outputs, qos)


def format_repository(repo: Repository) -> str:
    lines = ["[concepts]"]
    for concept in repo.concepts:
        if concept.aliases:
            lines.append(f"{concept.id}: {', '.join(sorted(concept.aliases))}")
        else:
            lines.append(concept.id)
    lines.append("")
    lines.append("[qos]")
    for p in repo.registry:
        lines.append(f"{p.name} {p.monotonicity} {p.seq_agg} {p.par_agg} {p.laxity_kind}")
    lines.append("")
    lines.append("[services]")
    for svc in repo.services:
        qos = ", ".join(f"{p.name}={svc.qos[p.name]!r}" for p in repo.registry)
        lines.append(
            f"{svc.id} | in: {', '.join(sorted(svc.inputs))}"
            f" | out: {', '.join(sorted(svc.outputs))} | qos: {qos}"
        )
    return "\n".join(lines) + "\n"


def load_repository(path: str | Path) -> Repository:
    return parse_repository(Path(path).read_text(encoding="utf-8"))


def save_repository(repo: Repository, path: str | Path) -> None:
    Path(path).write_text(format_repository(repo), encoding="utf-8")


def parse_query(text: str, repo: Repository) -> Query:
    inputs: set[str] = set()
    outputs: set[str] = set()
    bounds: dict[str, float] = {}
    for lineno, line in _iter_lines(text):
        key, sep, rest = line.partition(":")
        if not sep:
            raise FormatError(f"malformed query line {line!r}", lineno)
        key = key.strip().lower()
        if key == "in":
            inputs |= {repo.resolve(n.strip()) for n in rest.split(",") if n.strip()}
        elif key == "out":
            outputs |= {repo.resolve(n.strip()) for n in rest.split(",") if n.strip()}
        elif key == "bound":
            name, eq, value = rest.partition("=")
            if not eq:
                raise FormatError(f"malformed bound {rest!r}", lineno)
            name = name.strip()
            if name not in repo.params:
                raise ValidationError(f"bound on unregistered parameter {name!r}")
            bounds[name] = float(value)
        else:
            raise FormatError(f"unknown query line kind {key!r}", lineno)
    if not outputs:
        raise ValidationError("query must request at least one output")
    return Query(frozenset(inputs), frozenset(outputs), bounds)


def load_query(path: str | Path, repo: Repository) -> Query:
    return parse_query(Path(path).read_text(encoding="utf-8"), repo)


def format_query(query: Query) -> str:
    lines = [
        f"in: {', '.join(sorted(query.inputs))}",
        f"out: {', '.join(sorted(query.outputs))}",
    ]
    for name in sorted(query.bounds):
        lines.append(f"bound: {name}={query.bounds[name]!r}")
    return "\n".join(lines) + "\n"
