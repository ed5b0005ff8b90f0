"""Logical dataflow graph: vertices, edges and their validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

UNICAST = "unicast"
PARTITIONED = "partitioned"
BROADCAST = "broadcast"
ROUTINGS = (UNICAST, PARTITIONED, BROADCAST)

LOCAL = "local"
DISTRIBUTED = "distributed"
SCOPES = (LOCAL, DISTRIBUTED)

DEFAULT_QUEUE_CAPACITY = 1024
MAX_BLOCKING_PER_KIND = 2


def _is_power_of_two(n):
    return n > 0 and n & (n - 1) == 0


def _qualname(fn):
    if fn is None:
        return None
    module = getattr(fn, "__module__", None) or "?"
    name = getattr(fn, "__qualname__", None) or type(fn).__qualname__
    return f"{module}:{name}"


@dataclass(frozen=True)
class VertexSpec:
    name: str
    processor_factory: Callable
    local_parallelism: Optional[int] = None
    cooperative: bool = True

    def __post_init__(self):
        if not self.name:
            raise ValueError("vertex name must be non-empty")
        if self.local_parallelism is not None and self.local_parallelism < 1:
            raise ValueError(f"{self.name}: local_parallelism must be >= 1")
        if not self.cooperative and (self.local_parallelism or 1) > MAX_BLOCKING_PER_KIND:
            raise ValueError(
                f"{self.name}: non-cooperative vertices run at most "
                f"{MAX_BLOCKING_PER_KIND} instances per node"
            )

    def parallelism(self, cooperative_threads: int) -> int:
        if self.local_parallelism is not None:
            return self.local_parallelism
        return cooperative_threads if self.cooperative else 1


@dataclass(frozen=True)
class EdgeSpec:
    source: str
    dest: str
    source_ordinal: int = 0
    dest_ordinal: int = 0
    routing: str = UNICAST
    key_fn: Optional[Callable] = None
    scope: str = LOCAL
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    priority: int = 0

    def __post_init__(self):
        if self.routing not in ROUTINGS:
            raise ValueError(f"unknown routing {self.routing!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.routing == PARTITIONED and self.key_fn is None:
            raise ValueError(f"partitioned edge {self.name} needs a key extractor")
        if not _is_power_of_two(self.queue_capacity):
            raise ValueError(f"queue_capacity must be a power of two, got {self.queue_capacity}")
        if self.source_ordinal < 0 or self.dest_ordinal < 0:
            raise ValueError("ordinals must be non-negative")

    @property
    def name(self) -> str:
        return f"{self.source}[{self.source_ordinal}]->{self.dest}[{self.dest_ordinal}]"

    # fluent modifiers, each returning a new edge
    def partitioned(self, key_fn: Callable) -> "EdgeSpec":
        return replace(self, routing=PARTITIONED, key_fn=key_fn)

    def broadcast(self) -> "EdgeSpec":
        return replace(self, routing=BROADCAST, key_fn=None)

    def distributed(self) -> "EdgeSpec":
        return replace(self, scope=DISTRIBUTED)

    def from_ordinal(self, ordinal: int) -> "EdgeSpec":
        return replace(self, source_ordinal=ordinal)

    def to_ordinal(self, ordinal: int) -> "EdgeSpec":
        return replace(self, dest_ordinal=ordinal)

    def with_priority(self, priority: int) -> "EdgeSpec":
        return replace(self, priority=priority)

    def with_capacity(self, capacity: int) -> "EdgeSpec":
        return replace(self, queue_capacity=capacity)


def edge(source, dest, source_ordinal=0, dest_ordinal=0) -> EdgeSpec:
    """Unicast local edge; chain the fluent modifiers to change it."""
    src = source.name if isinstance(source, VertexSpec) else source
    dst = dest.name if isinstance(dest, VertexSpec) else dest
    return EdgeSpec(src, dst, source_ordinal, dest_ordinal)


class DagError(Exception):
    pass


class CycleDetected(DagError):
    def __init__(self, vertices):
        super().__init__(f"cycle through {vertices}")
        self.vertices = list(vertices)


class DanglingEdge(DagError):
    def __init__(self, name):
        super().__init__(f"edge {name} references a missing vertex")
        self.name = name


class DuplicateOrdinal(DagError):
    def __init__(self, vertex, ordinal, direction="inbound"):
        super().__init__(f"{vertex}: {direction} ordinal {ordinal} used more than once")
        self.vertex = vertex
        self.ordinal = ordinal
        self.direction = direction


class DuplicateVertex(DagError):
    def __init__(self, name):
        super().__init__(f"duplicate vertex name {name!r}")
        self.name = name


class TooManyBlockingVertices(DagError):
    def __init__(self, kind, count):
        super().__init__(
            f"{count} non-cooperative {kind} instances per node; at most {MAX_BLOCKING_PER_KIND}"
        )
        self.kind = kind
        self.count = count


class InvalidDag(DagError):
    def __init__(self, errors):
        super().__init__("; ".join(str(e) for e in errors))
        self.errors = list(errors)


@dataclass
class DagSpec:
    vertices: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def new_vertex(self, name, processor_factory, local_parallelism=None, cooperative=True):
        v = VertexSpec(name, processor_factory, local_parallelism, cooperative)
        self.vertices.append(v)
        return v

    def add_vertex(self, vertex: VertexSpec) -> VertexSpec:
        self.vertices.append(vertex)
        return vertex

    def add_edge(self, e: EdgeSpec) -> "DagSpec":
        self.edges.append(e)
        return self

    def vertex(self, name) -> VertexSpec:
        for v in self.vertices:
            if v.name == name:
                return v
        raise KeyError(name)

    def inbound(self, name):
        return sorted((e for e in self.edges if e.dest == name), key=lambda e: e.dest_ordinal)

    def outbound(self, name):
        return sorted(
            (e for e in self.edges if e.source == name), key=lambda e: e.source_ordinal
        )

    def topological_order(self):
        """Vertex names sourced-first; ties broken by insertion order."""
        indegree = {v.name: 0 for v in self.vertices}
        for e in self.edges:
            indegree[e.dest] += 1
        ready = [v.name for v in self.vertices if indegree[v.name] == 0]
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            for e in self.outbound(name):
                indegree[e.dest] -= 1
                if indegree[e.dest] == 0:
                    ready.append(e.dest)
        return order

    def validate(self) -> "DagSpec":
        errors = validate_dag(self)
        if errors:
            raise InvalidDag(errors)
        return self

    def to_json_dict(self) -> dict:
        return {
            "vertices": [
                {
                    "name": v.name,
                    "processor_factory": _qualname(v.processor_factory),
                    "local_parallelism": v.local_parallelism,
                    "cooperative": v.cooperative,
                }
                for v in self.vertices
            ],
            "edges": [
                {
                    "from": e.source,
                    "from_ordinal": e.source_ordinal,
                    "to": e.dest,
                    "to_ordinal": e.dest_ordinal,
                    "routing": e.routing,
                    "key_extractor": _qualname(e.key_fn),
                    "scope": e.scope,
                    "queue_capacity": e.queue_capacity,
                    "priority": e.priority,
                }
                for e in self.edges
            ],
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)


def _find_cycle(names, successors):
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(names, WHITE)
    for root in names:
        if color[root] != WHITE:
            continue
        path = [root]
        color[root] = GREY
        stack = [iter(successors[root])]
        while stack:
            advanced = False
            for nxt in stack[-1]:
                if color[nxt] == GREY:
                    return path[path.index(nxt):]
                if color[nxt] == WHITE:
                    color[nxt] = GREY
                    path.append(nxt)
                    stack.append(iter(successors[nxt]))
                    advanced = True
                    break
            if not advanced:
                color[path.pop()] = BLACK
                stack.pop()
    return None


def validate_dag(dag: DagSpec) -> list:
    """Return the list of structural errors; an empty list means the DAG is valid."""
    errors = []
    names = []
    seen = set()
    for v in dag.vertices:
        if v.name in seen:
            errors.append(DuplicateVertex(v.name))
        else:
            seen.add(v.name)
            names.append(v.name)

    successors = {n: [] for n in names}
    in_ordinals = set()
    out_ordinals = set()
    for e in dag.edges:
        if e.source not in seen or e.dest not in seen:
            errors.append(DanglingEdge(e.name))
            continue
        if (e.dest, e.dest_ordinal) in in_ordinals:
            errors.append(DuplicateOrdinal(e.dest, e.dest_ordinal, "inbound"))
        in_ordinals.add((e.dest, e.dest_ordinal))
        if (e.source, e.source_ordinal) in out_ordinals:
            errors.append(DuplicateOrdinal(e.source, e.source_ordinal, "outbound"))
        out_ordinals.add((e.source, e.source_ordinal))
        successors[e.source].append(e.dest)

    cycle = _find_cycle(names, successors)
    if cycle:
        errors.append(CycleDetected(cycle))

    has_in = {e.dest for e in dag.edges}
    has_out = {e.source for e in dag.edges}
    blocking_sources = sum(
        v.local_parallelism or 1
        for v in dag.vertices
        if not v.cooperative and v.name not in has_in
    )
    blocking_sinks = sum(
        v.local_parallelism or 1
        for v in dag.vertices
        if not v.cooperative and v.name in has_in and v.name not in has_out
    )
    if blocking_sources > MAX_BLOCKING_PER_KIND:
        errors.append(TooManyBlockingVertices("source", blocking_sources))
    if blocking_sinks > MAX_BLOCKING_PER_KIND:
        errors.append(TooManyBlockingVertices("sink", blocking_sinks))
    return errors
