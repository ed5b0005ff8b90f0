"""Deterministic NEXMark event generation, pacing source and trace files.

Event ``i`` is a pure function of ``(seed, i)``: its kind follows from ``i``
and the configured proportions, and its random fields come from a
counter-based hash. Any subset of indices can therefore be produced by any
source instance, and a replay from an offset reproduces the same suffix.
"""

from __future__ import annotations

import heapq
import pickle
import time
from typing import Iterable

from ..connectors import ReplayableSourceP, source_partitions_for
from ..items import Event
from ..processor import Processor
from .model import CATEGORIES, STATES, Auction, Bid, GeneratorConfig, Person

_MASK = (1 << 64) - 1
TRACE_MAGIC = b"NXMTRACE1"


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class EventFactory:
    """Builds event ``i`` for one configuration."""

    def __init__(self, config: GeneratorConfig):
        self.config = config
        p, a, b = config.proportions
        self.period = p + a + b
        self.persons = p
        self.auctions = p + a
        self.keys = config.distinct_keys
        self.rate = config.events_per_second
        self.seed_mix = splitmix64(config.seed & _MASK)

    def __call__(self, i: int):
        t = i * 1000 // self.rate
        h1 = splitmix64(self.seed_mix ^ i)
        h2 = splitmix64(h1)
        key = h1 % self.keys
        slot = i % self.period
        if slot < self.persons:
            return Person(key, f"p{key}", STATES[h2 % len(STATES)], t)
        if slot < self.auctions:
            return Auction(i, key, h2 % CATEGORIES, t + 10_000, t)
        return Bid(key, h2 % self.keys, 1 + splitmix64(h2) % 10_000, t)


def generate(config: GeneratorConfig, start: int = 0, stop=None) -> list:
    """Events ``start..stop`` (default: the whole run) in index order."""
    make = EventFactory(config)
    stop = config.total_events if stop is None else stop
    return [make(i) for i in range(start, stop)]


def partition_events(events: Iterable, partitions: int) -> list:
    """``(event, event_time)`` lists, event ``i`` going to partition ``i % partitions``."""
    parts = [[] for _ in range(partitions)]
    for i, e in enumerate(events):
        parts[i % partitions].append((e, e.event_time))
    return parts


def replay_source_factory(config: GeneratorConfig, partitions: int = 8, batch_size: int = 512):
    """Unpaced replayable source over the whole generated run."""
    parts = partition_events(generate(config), partitions)
    return lambda: ReplayableSourceP(parts, batch_size)


class NexmarkSourceP(Processor):
    """Releases generated events at their predetermined wall-clock times.

    Event indices are split into ``source_partitions`` residue classes
    (index mod the partition count); each instance produces the classes it
    owns in increasing index order. Event ``i`` is released no earlier than
    ``start_wall + event_time(i) + source_delay``. After each call the
    watermark moves to the released time frontier, rounded down to
    ``watermark_granularity_ms``. Events released more than
    ``behind_threshold_ms`` late are counted under the ``fell_behind``
    metric. Non-cooperative instances sleep briefly while waiting;
    cooperative ones return at once.

    State: the next index of every owned residue class, so a restarted job
    resumes where the last snapshot left off, on any number of instances.
    """

    def __init__(self, config: GeneratorConfig, start_wall: float, cooperative: bool = False,
                 batch_size: int = 1024, behind_threshold_ms: float = 10.0, source_partitions: int = 16,
                 clock=time.time):
        self.config = config
        self.start_wall = start_wall
        self.cooperative = cooperative
        self.batch_size = batch_size
        self.behind_threshold_ms = behind_threshold_ms
        self.source_partitions = source_partitions
        self.clock = clock
        self.make = EventFactory(config)
        self.total = config.total_events
        self.last_wm = None
        self.released = 0
        self.max_behind_ms = 0.0
        self.offsets = {}
        self._heap = None

    def init(self, outbox, context):
        super().init(outbox, context)
        for r in source_partitions_for(context, self.source_partitions):
            self.offsets.setdefault(r, r)

    def _now_ms(self):
        return (self.clock() - self.start_wall) * 1000.0 - self.config.source_delay_ms

    def complete(self):
        heap = self._heap
        if heap is None:
            heap = self._heap = [(i, r) for r, i in self.offsets.items() if i < self.total]
            heapq.heapify(heap)
        if not heap:
            return True
        rate, step, total = self.config.events_per_second, self.source_partitions, self.total
        now = self._now_ms()
        t_next = heap[0][0] * 1000 // rate
        if t_next > now:
            if not self.cooperative:
                time.sleep(min(0.0005, (t_next - now) / 1000.0))
                now = self._now_ms()
            if t_next > now:
                self._watermark(now)
                return False
        make, offsets, threshold = self.make, self.offsets, self.behind_threshold_ms
        out = []
        behind = 0
        limit = self.batch_size
        while heap and len(out) < limit:
            i, r = heap[0]
            t = i * 1000 // rate
            if t > now:
                break
            if now - t > threshold:
                behind += 1
            out.append(Event(make(i), t))
            nxt = i + step
            offsets[r] = nxt
            if nxt < total:
                heapq.heapreplace(heap, (nxt, r))
            else:
                heapq.heappop(heap)
        if out:
            lag = now - out[0].event_time
            if lag > self.max_behind_ms:
                self.max_behind_ms = lag
        self.released += len(out)
        self.context.count("released", len(out))
        self.outbox.add_all(out)
        if behind:
            self.context.count("fell_behind", behind)
        if not heap:
            return True
        # everything this instance produces before its next index is out
        self._watermark(min(now, heap[0][0] * 1000 // rate - 1))
        return False

    def _watermark(self, released_upto):
        g = self.config.watermark_granularity_ms
        wm = (int(released_upto) + 1) // g * g
        if self.last_wm is None or wm > self.last_wm:
            self.last_wm = wm
            self.outbox.add_watermark(wm)

    def save_to_snapshot(self):
        return list(self.offsets.items())

    def restore_from_snapshot(self, entries):
        for r, index in entries:
            self.offsets[r] = index
        self._heap = None


# ------------------------------------------------------------------ traces


def write_trace(path, config: GeneratorConfig, events=None):
    """Record a run to ``path`` (header, config and events, pickled)."""
    events = generate(config) if events is None else events
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        pickle.dump(config.to_dict(), f, protocol=pickle.HIGHEST_PROTOCOL)
        pickle.dump([tuple(e) + (type(e).__name__,) for e in events], f, protocol=pickle.HIGHEST_PROTOCOL)


_KINDS = {"Person": Person, "Auction": Auction, "Bid": Bid}


def read_trace(path):
    """Returns ``(config, events)``."""
    with open(path, "rb") as f:
        if f.read(len(TRACE_MAGIC)) != TRACE_MAGIC:
            raise ValueError(f"{path} is not a trace file")
        config = GeneratorConfig.from_dict(pickle.load(f))
        rows = pickle.load(f)
    return config, [_KINDS[row[-1]](*row[:-1]) for row in rows]
