"""Fluent pipeline builder compiled to a Core DAG.

A :class:`Pipeline` is a graph of stages. Each stage is either batch
(finite input) or stream (infinite input). ``compile`` turns it into a
:class:`~tailstream.dag.DagSpec`: runs of stateless stages are fused into a
single vertex, keyed aggregates become an accumulate/combine vertex pair,
and a hash join becomes a build vertex broadcasting its table to a probe
vertex. :func:`interpret` evaluates the same pipeline directly, one stage at
a time, and serves as the reference for the compiled form.

Example::

    p = Pipeline()
    (p.read_from(Sources.batch(lines))
      .flat_map(str.split)
      .filter(bool)
      .grouping_key(whole_item)
      .aggregate(counting())
      .write_to(Sinks.list(out)))
    run_job(p.compile())
"""

from __future__ import annotations

import inspect
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .connectors import ReplayableSourceP
from .dag import BROADCAST, DISTRIBUTED, PARTITIONED, DagSpec, EdgeSpec, VertexSpec
from .items import Event
from .processor import FILTER, FLAT_MAP, MAP, CollectSinkP, FusedP, ListSourceP, Processor, apply_chain
from .snapshot import BroadcastKey
from .windows import (
    AggregateOperation, WindowDefinition, WindowResult, brute_force_windows, reduce_vertex,
    split_two_stage,
)

BATCH = "batch"
STREAM = "stream"

SOURCE = "source"
KEYED_AGGREGATE = "keyedAggregate"
WINDOWED_AGGREGATE = "windowedAggregate"
HASH_JOIN = "hashJoin"
SINK = "sink"
STATELESS = (MAP, FILTER, FLAT_MAP)


class PipelineError(ValueError):
    pass


class BoundednessMismatch(PipelineError):
    pass


class MissingKey(PipelineError):
    pass


def whole_item(x):
    return x


def _global_key(_x):
    return 0


def _check_callable(fn, arity, what):
    if not callable(fn):
        raise TypeError(f"{what} must be callable, got {fn!r}")
    try:
        inspect.signature(fn).bind(*([None] * arity))
    except TypeError as e:
        raise TypeError(f"{what} must accept {arity} argument(s): {e}") from None
    except ValueError:
        pass  # builtins without an introspectable signature


# ----------------------------------------------------------- sources/sinks


@dataclass
class SourceDef:
    name: str
    boundedness: str
    factory: Callable
    # ``(payload, event_time)`` pairs when the content is known up front (used by ``interpret``)
    items: Optional[list] = None
    blocking: bool = False
    local_parallelism: Optional[int] = None


@dataclass
class SinkDef:
    name: str
    factory: Callable
    target: Optional[list] = None
    blocking: bool = False
    local_parallelism: Optional[int] = None


class _StreamListFactory:
    def __init__(self, partitions, allowed_lag, batch_size):
        self.partitions = partitions
        self.allowed_lag = allowed_lag
        self.batch_size = batch_size

    def __call__(self):
        return ReplayableSourceP(self.partitions, self.batch_size, allowed_lag=self.allowed_lag)


class Sources:
    @staticmethod
    def batch(items, name="batch-source", batch_size=1024) -> SourceDef:
        items = list(items)
        pairs = [(x, 0) for x in items]
        return SourceDef(name, BATCH, lambda: ListSourceP(items, batch_size), pairs)

    @staticmethod
    def stream(timestamped, name="stream-source", allowed_lag=0, partitions=4, batch_size=256) -> SourceDef:
        """Replayable stream over ``(payload, event_time)`` pairs split into partitions."""
        pairs = list(timestamped)
        parts = [pairs[i::partitions] for i in range(partitions)]
        return SourceDef(name, STREAM, _StreamListFactory(parts, allowed_lag, batch_size), pairs)

    @staticmethod
    def custom(factory, boundedness, name="custom-source", blocking=False, items=None,
               local_parallelism=None) -> SourceDef:
        if boundedness not in (BATCH, STREAM):
            raise ValueError(f"boundedness must be {BATCH!r} or {STREAM!r}")
        return SourceDef(name, boundedness, factory, items, blocking, local_parallelism)


class Sinks:
    @staticmethod
    def list(target: list, name="list-sink") -> SinkDef:
        return SinkDef(name, lambda: CollectSinkP(target), target)

    @staticmethod
    def custom(factory, name="custom-sink", blocking=False, local_parallelism=None) -> SinkDef:
        return SinkDef(name, factory, None, blocking, local_parallelism)


# ------------------------------------------------------------------ stages


@dataclass
class Stage:
    pipeline: "Pipeline"
    id: int
    kind: str
    boundedness: str
    inputs: tuple = ()
    fn: Optional[Callable] = None
    key_fn: Optional[Callable] = None
    agg: Optional[AggregateOperation] = None
    wdef: Optional[WindowDefinition] = None
    window_reducer: Optional[AggregateOperation] = None
    allowed_lag: int = 0
    build_key_fn: Optional[Callable] = None
    source: Optional[SourceDef] = None
    sink: Optional[SinkDef] = None

    @property
    def name(self) -> str:
        base = self.source.name if self.source else self.sink.name if self.sink else self.kind
        return f"{base}-{self.id}"

    def _add(self, kind, **kw):
        return self.pipeline._add(kind, kw.pop("boundedness", self.boundedness), (self.id,), **kw)

    # stateless

    def map(self, fn) -> "Stage":
        _check_callable(fn, 1, "map function")
        return self._add(MAP, fn=fn)

    def filter(self, fn) -> "Stage":
        _check_callable(fn, 1, "filter predicate")
        return self._add(FILTER, fn=fn)

    def flat_map(self, fn) -> "Stage":
        _check_callable(fn, 1, "flat_map function")
        return self._add(FLAT_MAP, fn=fn)

    # keyed / windowed

    def grouping_key(self, key_fn) -> "KeyedStage":
        if key_fn is None:
            raise MissingKey("grouping_key needs a key extractor")
        _check_callable(key_fn, 1, "key extractor")
        return KeyedStage(self, key_fn)

    def window(self, wdef: WindowDefinition, allowed_lag: int = 0) -> "WindowedStage":
        return WindowedStage(self, None, wdef, allowed_lag)

    def aggregate(self, agg: AggregateOperation) -> "Stage":
        """Global aggregate of a batch stage: emits one result at the end."""
        return _aggregate(self, None, agg)

    # joins and sinks

    def hash_join(self, build: "Stage", probe_key_fn, build_key_fn) -> "Stage":
        """Inner join of this stage's items against a fully consumed batch ``build`` stage.

        Emits ``(probe_item, build_item)`` for every build item whose key
        matches the probe item's key.
        """
        if build.pipeline is not self.pipeline:
            raise PipelineError("both join inputs must belong to the same pipeline")
        if build.boundedness != BATCH:
            raise BoundednessMismatch("the build side of a hash join must be a batch stage")
        if probe_key_fn is None or build_key_fn is None:
            raise MissingKey("a hash join needs key extractors on both sides")
        _check_callable(probe_key_fn, 1, "probe key extractor")
        _check_callable(build_key_fn, 1, "build key extractor")
        return self.pipeline._add(
            HASH_JOIN, self.boundedness, (self.id, build.id), key_fn=probe_key_fn,
            build_key_fn=build_key_fn,
        )

    def write_to(self, sink: SinkDef) -> "Stage":
        return self._add(SINK, sink=sink)


@dataclass
class KeyedStage:
    upstream: Stage
    key_fn: Callable

    def window(self, wdef: WindowDefinition, allowed_lag: int = 0) -> "WindowedStage":
        return WindowedStage(self.upstream, self.key_fn, wdef, allowed_lag)

    def aggregate(self, agg: AggregateOperation) -> Stage:
        """Keyed batch aggregate emitting ``(key, result)`` once the input is exhausted."""
        return _aggregate(self.upstream, self.key_fn, agg)


@dataclass
class WindowedStage:
    upstream: Stage
    key_fn: Optional[Callable]
    wdef: WindowDefinition
    allowed_lag: int = 0

    def aggregate(self, agg: AggregateOperation, window_reducer: Optional[AggregateOperation] = None) -> Stage:
        """Sliding-window aggregate emitting :class:`WindowResult` items.

        With ``window_reducer`` the per-key results of each window are folded
        into one result per window (key ``None``).
        """
        up = self.upstream
        if up.boundedness != STREAM:
            raise BoundednessMismatch("windowed aggregation needs a stream stage")
        return up._add(
            WINDOWED_AGGREGATE, key_fn=self.key_fn or _global_key, agg=agg, wdef=self.wdef,
            window_reducer=window_reducer, allowed_lag=self.allowed_lag,
        )


def _aggregate(up: Stage, key_fn, agg) -> Stage:
    if up.boundedness == STREAM:
        raise BoundednessMismatch(
            "aggregating an infinite stream needs a window; call window() first"
        )
    return up._add(KEYED_AGGREGATE, key_fn=key_fn, agg=agg)


class Pipeline:
    def __init__(self):
        self.stages = []

    def read_from(self, source: SourceDef) -> Stage:
        return self._add(SOURCE, source.boundedness, (), source=source)

    def _add(self, kind, boundedness, inputs, **kw) -> Stage:
        for i in inputs:
            if self.stages[i].kind == SINK:
                raise PipelineError("a sink stage has no output")
        st = Stage(self, len(self.stages), kind, boundedness, tuple(inputs), **kw)
        self.stages.append(st)
        return st

    def downstream(self, stage_id):
        return [s for s in self.stages if stage_id in s.inputs]

    def validate(self):
        errors = []
        for s in self.stages:
            if s.kind == HASH_JOIN:
                if len(s.inputs) != 2:
                    errors.append(f"{s.name}: hash join needs one probe and one build input")
                elif self.stages[s.inputs[1]].boundedness != BATCH:
                    errors.append(f"{s.name}: build input must be batch")
            if s.kind in (KEYED_AGGREGATE,) and self.stages[s.inputs[0]].boundedness == STREAM:
                errors.append(f"{s.name}: unwindowed aggregate over a stream")
            if s.kind == WINDOWED_AGGREGATE and s.key_fn is None:
                errors.append(f"{s.name}: windowed aggregate without a key")
        if not any(s.kind == SINK for s in self.stages):
            errors.append("pipeline has no sink")
        if errors:
            raise PipelineError("; ".join(errors))
        return self

    def fusion_plan(self, fuse=True):
        """Groups of stage ids that compile to one vertex each."""
        groups = []
        grouped = set()
        for s in self.stages:
            if s.id in grouped:
                continue
            group = [s.id]
            grouped.add(s.id)
            if fuse and s.kind in STATELESS:
                cur = s
                while True:
                    nxt = self.downstream(cur.id)
                    if len(nxt) != 1 or nxt[0].kind not in STATELESS or len(nxt[0].inputs) != 1:
                        break
                    if nxt[0].boundedness != cur.boundedness:
                        break
                    cur = nxt[0]
                    group.append(cur.id)
                    grouped.add(cur.id)
            groups.append(group)
        return groups

    def compile(self, fuse: bool = True, local_parallelism=None) -> DagSpec:
        """Translate into a Core DAG (``fuse=False`` keeps one vertex per stateless stage)."""
        self.validate()
        return _Compiler(self, fuse, local_parallelism).run()


# --------------------------------------------------------------- compiling


class HashJoinBuildP(Processor):
    """Collects the build side into ``key -> [rows]`` and emits it at the end."""

    def __init__(self, key_fn):
        self.key_fn = key_fn
        self.table = {}

    def process(self, ordinal, inbox):
        key_fn, table = self.key_fn, self.table
        for ev in inbox:
            table.setdefault(key_fn(ev.payload), []).append(ev.payload)
        inbox.clear()

    def complete(self):
        self.outbox.add(Event(self.table, 0))
        return True


class HashJoinProbeP(Processor):
    """Probes the broadcast build table (ordinal 1) with every item on ordinal 0."""

    def __init__(self, key_fn):
        self.key_fn = key_fn
        self.table = {}

    def process(self, ordinal, inbox):
        if ordinal == 1:
            for ev in inbox:
                for key, rows in ev.payload.items():
                    self.table.setdefault(key, []).extend(rows)
            inbox.clear()
            return
        key_fn, table = self.key_fn, self.table
        out = []
        for ev in inbox:
            rows = table.get(key_fn(ev.payload))
            if rows:
                t = ev.event_time
                out.extend(Event((ev.payload, row), t) for row in rows)
        inbox.clear()
        self.outbox.add_all(out)

    def save_to_snapshot(self):
        return [(BroadcastKey("table"), self.table)]

    def restore_from_snapshot(self, entries):
        for _key, table in entries:
            self.table = table


class _GlobalResultP(Processor):
    """Drops the constant key of a global aggregate's ``(key, result)`` output."""

    def process(self, ordinal, inbox):
        self.outbox.add_all([Event(ev.payload[1], ev.event_time) for ev in inbox])
        inbox.clear()


def _fused_factory(chain):
    return lambda: FusedP(chain)


class _Compiler:
    def __init__(self, pipeline, fuse, local_parallelism):
        self.p = pipeline
        self.fuse = fuse
        self.lp = local_parallelism
        self.dag = DagSpec()
        # stage id -> (vertex name, source ordinal) producing that stage's output
        self.out_of = {}
        # stage id -> (vertex name, dest ordinal) receiving that stage's input(s)
        self.in_of = {}

    def run(self) -> DagSpec:
        for group in self.p.fusion_plan(self.fuse):
            self._compile_group([self.p.stages[i] for i in group])
        for s in self.p.stages:
            for pos, i in enumerate(s.inputs):
                self._connect(self.p.stages[i], s, pos)
        self.dag.validate()
        return self.dag

    def _vertex(self, name, factory, cooperative=True, lp=None):
        return self.dag.add_vertex(VertexSpec(name, factory, lp if lp is not None else self.lp, cooperative))

    def _compile_group(self, stages):
        first, last = stages[0], stages[-1]
        kind = first.kind
        if kind == SOURCE:
            src = first.source
            v = self._vertex(first.name, src.factory, not src.blocking, src.local_parallelism)
            self.out_of[first.id] = (v.name, 0)
        elif kind == SINK:
            sink = first.sink
            v = self._vertex(first.name, sink.factory, not sink.blocking, sink.local_parallelism)
            self.in_of[first.id] = [(v.name, 0, None)]
        elif kind in STATELESS:
            chain = [(s.kind, s.fn) for s in stages]
            name = "+".join(f"{s.kind}-{s.id}" for s in stages)
            v = self._vertex(name, _fused_factory(chain))
            self.in_of[first.id] = [(v.name, 0, None)]
            self.out_of[last.id] = (v.name, 0)
        elif kind == KEYED_AGGREGATE:
            key_fn = first.key_fn or _global_key
            two = split_two_stage(first.name, key_fn, first.agg, local_parallelism=self.lp)
            self.dag.add_vertex(two.accumulate)
            self.dag.add_vertex(two.combine)
            self.dag.add_edge(two.inner_edge)
            self.in_of[first.id] = [(two.accumulate.name, 0, key_fn)]
            if first.key_fn is None:
                g = self._vertex(f"{first.name}-result", _GlobalResultP)
                self.dag.add_edge(EdgeSpec(two.combine.name, g.name))
                self.out_of[first.id] = (g.name, 0)
            else:
                self.out_of[first.id] = (two.combine.name, 0)
        elif kind == WINDOWED_AGGREGATE:
            two = split_two_stage(
                first.name, first.key_fn, first.agg, first.wdef, first.window_reducer,
                first.allowed_lag, local_parallelism=self.lp,
            )
            self.dag.add_vertex(two.accumulate)
            self.dag.add_vertex(two.combine)
            self.dag.add_edge(two.inner_edge)
            self.in_of[first.id] = [(two.accumulate.name, 0, first.key_fn)]
            if first.window_reducer is not None:
                rv, rkey = reduce_vertex(f"{first.name}-reduce", first.window_reducer, self.lp)
                self.dag.add_vertex(rv)
                self.dag.add_edge(EdgeSpec(
                    two.combine.name, rv.name, routing=PARTITIONED, key_fn=rkey, scope=DISTRIBUTED,
                ))
                self.out_of[first.id] = (rv.name, 0)
            else:
                self.out_of[first.id] = (two.combine.name, 0)
        elif kind == HASH_JOIN:
            build_name = f"{first.name}-build"
            bkey = first.build_key_fn
            self._vertex(build_name, lambda: HashJoinBuildP(bkey))
            pkey = first.key_fn
            probe = self._vertex(f"{first.name}-probe", lambda: HashJoinProbeP(pkey))
            self.dag.add_edge(EdgeSpec(
                build_name, probe.name, dest_ordinal=1, routing=BROADCAST, scope=DISTRIBUTED, priority=-1,
            ))
            self.in_of[first.id] = [(probe.name, 0, None), (build_name, 0, None)]
            self.out_of[first.id] = (probe.name, 0)
        else:
            raise PipelineError(f"unknown stage kind {kind!r}")

    def _connect(self, up: Stage, down: Stage, pos: int):
        targets = self.in_of.get(down.id)
        if targets is None:
            return  # fused interior stage, wired inside the vertex
        src, src_ord = self.out_of[up.id]
        dest, dest_ord, key_fn = targets[pos]
        # every outbox ordinal receives the processor's whole output, so a
        # stage with several consumers gets one source ordinal per consumer
        fanout = self.p.downstream(up.id)
        if len(fanout) > 1:
            src_ord = [s.id for s in fanout].index(down.id)
        e = EdgeSpec(src, dest, src_ord, dest_ord)
        if key_fn is not None:
            e = e.partitioned(key_fn)
        self.dag.add_edge(e)


# ------------------------------------------------------------ interpreting


def interpret(pipeline: Pipeline) -> dict:
    """Evaluate ``pipeline`` directly, stage by stage, on one thread.

    Returns ``{sink stage name: [payloads]}``. Every source must carry its
    items. Windowed results are returned as ``(window_end, key, value)``.
    """
    pipeline.validate()
    values = {}  # stage id -> list of (payload, event_time)
    out = {}
    for s in pipeline.stages:
        ins = [values[i] for i in s.inputs]
        if s.kind == SOURCE:
            if s.source.items is None:
                raise PipelineError(f"{s.name}: source content unknown, cannot interpret")
            res = list(s.source.items)
        elif s.kind in STATELESS:
            res = [(y, t) for x, t in ins[0] for y in apply_chain([(s.kind, s.fn)], x)]
        elif s.kind == KEYED_AGGREGATE:
            accs = {}
            key_fn = s.key_fn or _global_key
            for x, _t in ins[0]:
                k = key_fn(x)
                accs[k] = s.agg.accumulate(accs[k] if k in accs else s.agg.create(), x)
            if s.key_fn is None:
                res = [(s.agg.finish(a), 0) for a in accs.values()]
            else:
                res = [((k, s.agg.finish(a)), 0) for k, a in accs.items()]
        elif s.kind == WINDOWED_AGGREGATE:
            per_window = brute_force_windows(ins[0], s.key_fn, s.wdef, s.agg)
            res = []
            for end, mapping in sorted(per_window.items()):
                if s.window_reducer is not None:
                    r = s.window_reducer
                    acc = r.create()
                    for pair in mapping.items():
                        acc = r.accumulate(acc, pair)
                    res.append((WindowResult(end, None, r.finish(acc), None, None), end - 1))
                else:
                    res.extend((WindowResult(end, k, v, None, None), end - 1) for k, v in mapping.items())
        elif s.kind == HASH_JOIN:
            probe, build = ins
            res = [
                ((x, b), t) for x, t in probe for b, _ in build
                if s.key_fn(x) == s.build_key_fn(b)
            ]
        elif s.kind == SINK:
            out[s.name] = [x for x, _t in ins[0]]
            res = []
        values[s.id] = res
    return out


def comparable(values) -> Counter:
    """Multiset view of sink output with timing fields of window results removed."""
    return Counter(v.core() if isinstance(v, WindowResult) else v for v in values)


__all__ = [
    "BATCH", "STATELESS", "BoundednessMismatch", "HashJoinBuildP", "HashJoinProbeP", "KeyedStage", "MissingKey",
    "Pipeline", "PipelineError", "STREAM", "SinkDef", "Sinks", "SourceDef", "Sources", "Stage",
    "WindowedStage", "comparable", "interpret", "whole_item",
]
