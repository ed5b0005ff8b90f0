"""Processor contract and a handful of stock processors.

A processor holds the user logic of one vertex instance. Its tasklet fills
an inbox, calls :meth:`Processor.process`, and ships whatever landed in the
outbox. Processors never touch queues directly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .items import ControlItem, Event, Watermark


class Outbox:
    """Per-ordinal output buffers filled by a processor during one call."""

    __slots__ = ("buckets", "ordinal_count", "has_control")

    def __init__(self, ordinal_count: int):
        self.ordinal_count = ordinal_count
        self.buckets = [[] for _ in range(ordinal_count)]
        self.has_control = False

    def add(self, item, ordinal: Optional[int] = None):
        if ordinal is None:
            for bucket in self.buckets:
                bucket.append(item)
        else:
            self.buckets[ordinal].append(item)

    def add_all(self, items, ordinal: Optional[int] = None):
        if ordinal is None:
            for bucket in self.buckets:
                bucket.extend(items)
        else:
            self.buckets[ordinal].extend(items)

    def add_watermark(self, time):
        """Emit a watermark on every ordinal, ordered after the events added so far."""
        self.has_control = True
        for bucket in self.buckets:
            bucket.append(Watermark(time))

    def is_empty(self) -> bool:
        for bucket in self.buckets:
            if bucket:
                return False
        return True

    def pending(self) -> int:
        return sum(len(b) for b in self.buckets)


@dataclass
class ProcessorContext:
    vertex_name: str
    global_index: int = 0
    local_index: int = 0
    local_parallelism: int = 1
    total_parallelism: int = 1
    node_id: int = 0
    node_ids: tuple = (0,)
    job_id: int = 0
    execution_id: int = 0
    guarantee: str = "none"
    partition_count: int = 271
    # partition ids this instance owns (owner node == this node and pid % local_parallelism == local_index)
    owned_partitions: tuple = ()
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    services: dict = field(default_factory=dict)

    def count(self, name: str, delta: int = 1):
        self.metrics[name] = self.metrics.get(name, 0) + delta


class Processor:
    """Base class; override what the vertex needs.

    Methods returning ``bool`` report whether the step finished; the tasklet
    calls them again on a later pass when they return False.
    """

    cooperative = True

    def init(self, outbox: Outbox, context: ProcessorContext):
        self.outbox = outbox
        self.context = context

    def process(self, ordinal: int, inbox: deque):
        """Consume events from ``inbox``; anything left is offered again next call."""
        inbox.clear()

    def process_watermark(self, time) -> bool:
        return True

    def complete_edge(self, ordinal: int) -> bool:
        return True

    def complete(self) -> bool:
        return True

    # snapshots

    def save_to_snapshot(self):
        """Return an iterable of ``(state_key, value)`` pairs describing the state."""
        return ()

    def restore_from_snapshot(self, entries):
        pass

    def finish_restore(self):
        pass

    def snapshot_prepare(self, snapshot_id: int) -> bool:
        """First phase of a two-phase commit; sinks seal their pending output here."""
        return True

    def snapshot_commit(self, snapshot_id: int, success: bool):
        """Second phase, called once the coordinator decided on ``snapshot_id``."""

    def close(self):
        pass


class MapP(Processor):
    def __init__(self, fn: Callable):
        self.fn = fn

    def process(self, ordinal, inbox):
        fn = self.fn
        self.outbox.add_all([Event(fn(ev.payload), ev.event_time) for ev in inbox])
        inbox.clear()


class FilterP(Processor):
    def __init__(self, predicate: Callable):
        self.predicate = predicate

    def process(self, ordinal, inbox):
        pred = self.predicate
        self.outbox.add_all([ev for ev in inbox if pred(ev.payload)])
        inbox.clear()


class FlatMapP(Processor):
    def __init__(self, fn: Callable):
        self.fn = fn

    def process(self, ordinal, inbox):
        fn = self.fn
        out = []
        for ev in inbox:
            t = ev.event_time
            out.extend(Event(x, t) for x in fn(ev.payload))
        self.outbox.add_all(out)
        inbox.clear()


MAP, FILTER, FLAT_MAP = "map", "filter", "flat_map"


def apply_chain(chain, payload):
    """Run one payload through a fused stateless chain; returns a list of outputs."""
    values = [payload]
    for kind, fn in chain:
        if kind == MAP:
            values = [fn(v) for v in values]
        elif kind == FILTER:
            values = [v for v in values if fn(v)]
        else:
            values = [x for v in values for x in fn(v)]
        if not values:
            break
    return values


class FusedP(Processor):
    """Several consecutive stateless stages applied in one processor."""

    def __init__(self, chain):
        self.chain = tuple(chain)
        kinds = {kind for kind, _ in self.chain}
        if kinds - {MAP, FILTER, FLAT_MAP}:
            raise ValueError(f"only stateless stages can be fused: {kinds}")

    def process(self, ordinal, inbox):
        chain = self.chain
        out = []
        if len(chain) == 1:
            kind, fn = chain[0]
            if kind == MAP:
                out = [Event(fn(ev.payload), ev.event_time) for ev in inbox]
            elif kind == FILTER:
                out = [ev for ev in inbox if fn(ev.payload)]
            else:
                for ev in inbox:
                    t = ev.event_time
                    out.extend(Event(x, t) for x in fn(ev.payload))
        else:
            for ev in inbox:
                t = ev.event_time
                out.extend(Event(x, t) for x in apply_chain(chain, ev.payload))
        self.outbox.add_all(out)
        inbox.clear()


class NoopP(Processor):
    def process(self, ordinal, inbox):
        inbox.clear()


class PassThroughP(Processor):
    def process(self, ordinal, inbox):
        self.outbox.add_all(list(inbox))
        inbox.clear()


class ListSourceP(Processor):
    """Emits a fixed list of ``(payload, event_time)`` pairs split across all instances.

    Instance ``g`` of ``n`` emits items whose index is congruent to ``g`` mod
    ``n``. Intended for tests and batch inputs; not snapshot-aware.
    """

    def __init__(self, items, batch_size: int = 1024, timestamped: bool = False):
        self.items = items
        self.batch_size = batch_size
        self.timestamped = timestamped

    def init(self, outbox, context):
        super().init(outbox, context)
        self._pos = context.global_index
        self._step = context.total_parallelism

    def complete(self) -> bool:
        items, pos, step = self.items, self._pos, self._step
        end = min(len(items), pos + step * self.batch_size)
        if self.timestamped:
            out = [Event(p, t) for p, t in items[pos:end:step]]
        else:
            out = [Event(p, 0) for p in items[pos:end:step]]
        self.outbox.add_all(out)
        self._pos = pos + step * len(out)
        return self._pos >= len(items)


class CollectSinkP(Processor):
    """Appends every payload to a shared list (thread-safe ``list.extend``)."""

    def __init__(self, target: list, with_time: bool = False):
        self.target = target
        self.with_time = with_time

    def process(self, ordinal, inbox):
        if self.with_time:
            self.target.extend((ev.payload, ev.event_time) for ev in inbox)
        else:
            self.target.extend(ev.payload for ev in inbox)
        inbox.clear()


def is_control(item: Any) -> bool:
    return isinstance(item, ControlItem)
