"""Event-time windowing: frames, watermarks and two-stage sliding aggregation.

A sliding window of ``window_size`` advancing by ``slide`` is decomposed
into frames of length ``slide``. An event at time ``t`` belongs to the frame
ending at ``(t // slide + 1) * slide``; the window ending at ``W`` is the
union of frames ending in ``(W - window_size, W]``. Window ends are
exclusive: an event at exactly ``W`` lands in the next frame.
"""

from __future__ import annotations

import heapq
import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

from .dag import DISTRIBUTED, PARTITIONED, EdgeSpec, VertexSpec
from .items import MAX_TIME, MIN_TIME, BroadcastKey, Event, Watermark
from .processor import Processor


@dataclass(frozen=True)
class WindowDefinition:
    window_size: int
    slide: int

    def __post_init__(self):
        if self.window_size <= 0 or self.slide <= 0:
            raise ValueError("window size and slide must be positive")
        if self.window_size % self.slide:
            raise ValueError(f"slide {self.slide} must divide window size {self.window_size}")

    @property
    def frames_per_window(self) -> int:
        return self.window_size // self.slide

    def window_ends_containing(self, event_time) -> range:
        first = assign_frame(event_time, self.slide)
        return range(first, first + self.window_size, self.slide)


def sliding(window_size: int, slide: int) -> WindowDefinition:
    return WindowDefinition(window_size, slide)


def tumbling(window_size: int) -> WindowDefinition:
    return WindowDefinition(window_size, window_size)


@dataclass(frozen=True)
class AggregateOperation:
    """Functional aggregate: every step returns the new accumulator.

    ``deduct`` is optional; with it, sliding windows update a running
    accumulator instead of recombining every frame. ``accumulate_many`` is an
    optional bulk path taking a ``{key: value}`` mapping. ``incremental``
    optionally builds a tracker object (``update(key, value)``, ``partial()``)
    that keeps this aggregate's result over a changing ``{key: value}``
    mapping; window reducers with one are updated only for the keys a slide
    touched instead of refolding every key of every window.
    """

    create: Callable
    accumulate: Callable
    combine: Callable
    deduct: Optional[Callable] = None
    export_finish: Optional[Callable] = None
    accumulate_many: Optional[Callable] = None
    name: str = "aggregate"
    incremental: Optional[Callable] = None

    def finish(self, acc):
        return acc if self.export_finish is None else self.export_finish(acc)

    def without_deduct(self) -> "AggregateOperation":
        return AggregateOperation(
            self.create, self.accumulate, self.combine, None, self.export_finish,
            self.accumulate_many, self.name, self.incremental,
        )


def _add(a, b):
    return a + b


def _sub(a, b):
    return a - b


def _zero():
    return 0


def _count_one(acc, _item):
    return acc + 1


def counting() -> AggregateOperation:
    return AggregateOperation(_zero, _count_one, _add, _sub, None, None, "counting")


def summing(value_fn: Callable) -> AggregateOperation:
    def accumulate(acc, item):
        return acc + value_fn(item)

    return AggregateOperation(_zero, accumulate, _add, _sub, None, None, "summing")


def to_list() -> AggregateOperation:
    """Collects items; no deduct (list removal is not order-independent)."""
    return AggregateOperation(
        tuple, lambda acc, item: acc + (item,), lambda a, b: a + b, None,
        lambda acc: sorted(acc, key=repr), None, "to_list",
    )


def _top_create():
    return (0, ())


def _top_accumulate(acc, pair):
    key, value = pair
    best, keys = acc
    if value > best or not keys:
        return (value, (key,))
    if value == best:
        return (best, keys + (key,))
    return acc


def _top_combine(a, b):
    if not a[1]:
        return b
    if not b[1]:
        return a
    if a[0] > b[0]:
        return a
    if b[0] > a[0]:
        return b
    return (a[0], a[1] + b[1])


def _top_accumulate_many(acc, mapping):
    if not mapping:
        return acc
    best = max(mapping.values())
    return _top_combine(acc, (best, tuple(k for k, v in mapping.items() if v == best)))


def _top_export(acc):
    best, keys = acc
    return tuple(sorted((k, best) for k in keys))


class TopTracker:
    """Keys holding the maximum numeric value under single-key updates.

    ``by_value`` groups keys by value; a lazily cleaned max-heap of values
    finds the current maximum without scanning every key.
    """

    def __init__(self):
        self.value = {}
        self.by_value = {}
        self.heap = []

    def update(self, key, value):
        """Set ``key`` to ``value``; ``None`` removes the key."""
        old = self.value.get(key)
        if old is not None:
            group = self.by_value[old]
            group.discard(key)
            if not group:
                del self.by_value[old]
        if value is None:
            self.value.pop(key, None)
            return
        self.value[key] = value
        group = self.by_value.get(value)
        if group is None:
            self.by_value[value] = {key}
            heapq.heappush(self.heap, -value)
            if len(self.heap) > 4 * len(self.by_value) + 64:
                self.heap = [-v for v in self.by_value]
                heapq.heapify(self.heap)
        else:
            group.add(key)

    def partial(self):
        heap, by_value = self.heap, self.by_value
        while heap and -heap[0] not in by_value:
            heapq.heappop(heap)
        if not heap:
            return _top_create()
        best = -heap[0]
        return (best, tuple(by_value[best]))


def max_with_ties() -> AggregateOperation:
    """Over ``(key, value)`` pairs: every key reaching the maximum, with that value."""
    return AggregateOperation(
        _top_create, _top_accumulate, _top_combine, None, _top_export,
        _top_accumulate_many, "max_with_ties", TopTracker,
    )


class WindowResult(NamedTuple):
    end: int
    key: object
    value: object
    # wall-clock seconds when the aggregating stage started emitting this window
    emitted_at: Optional[float] = None
    # time (ms) of the window's last possible event (end - 1) plus the allowed lag
    trigger_time: Optional[float] = None

    def core(self):
        return (self.end, self.key, self.value)


def assign_frame(event_time, slide: int) -> int:
    if slide <= 0:
        raise ValueError("slide must be positive")
    return (math.floor(event_time) // slide + 1) * slide


def coalesce_watermarks(per_input_watermarks) -> float:
    """Minimum over active inputs; inputs reporting ``None`` (idle) are skipped."""
    active = [w for w in per_input_watermarks if w is not None]
    if not active:
        return MIN_TIME
    return min(active)


class WatermarkCoalescer:
    """Tracks per-channel watermarks and yields a monotonic vertex watermark.

    A channel whose latest watermark is ``None`` is idle and excluded until it
    sends a real one; a completed channel is excluded for good.
    """

    def __init__(self, channel_count: int):
        self.marks = [MIN_TIME] * channel_count
        self.idle = [False] * channel_count
        self.done = [False] * channel_count
        self.current = MIN_TIME

    def _recompute(self):
        active = [
            m for m, idle, done in zip(self.marks, self.idle, self.done) if not idle and not done
        ]
        if active:
            candidate = min(active)
        elif all(self.done):
            candidate = MAX_TIME
        else:
            # every live channel idle: nothing holds the watermark back except
            # what the channels already promised
            live = [m for m, d in zip(self.marks, self.done) if not d]
            candidate = max(live) if live else MAX_TIME
        if candidate > self.current:
            self.current = candidate
            return candidate
        return None

    def observe(self, channel: int, wm):
        """Record a watermark (``None`` = idle); returns the new vertex watermark or None."""
        if wm is None:
            self.idle[channel] = True
        else:
            if wm < self.marks[channel]:
                raise ValueError(f"watermark regressed on channel {channel}: {wm} < {self.marks[channel]}")
            self.marks[channel] = wm
            self.idle[channel] = False
        return self._recompute()

    def channel_done(self, channel: int):
        self.done[channel] = True
        return self._recompute()

    def all_idle(self) -> bool:
        live = [idle for idle, done in zip(self.idle, self.done) if not done]
        return bool(live) and all(live)


class WatermarkPolicy:
    """Source-side watermark generation: ``max event time - allowed_lag``."""

    def __init__(self, allowed_lag: int = 0, idle_timeout: Optional[float] = None, clock=time.monotonic):
        self.allowed_lag = allowed_lag
        self.idle_timeout = idle_timeout
        self.clock = clock
        self.max_event_time = MIN_TIME
        self.last_emitted = MIN_TIME
        self._last_activity = clock()
        self._idle_sent = False

    def observe(self, event_time):
        if event_time > self.max_event_time:
            self.max_event_time = event_time
        self._last_activity = self.clock()
        self._idle_sent = False

    def current(self):
        return self.max_event_time - self.allowed_lag

    def next_watermark(self):
        """A watermark to emit now (``Watermark`` instance) or None."""
        wm = self.current()
        if wm > self.last_emitted:
            self.last_emitted = wm
            return Watermark(wm)
        if (
            self.idle_timeout is not None
            and not self._idle_sent
            and self.clock() - self._last_activity >= self.idle_timeout
        ):
            self._idle_sent = True
            return Watermark(None)
        return None

    def is_late(self, event_time) -> bool:
        return event_time < self.last_emitted


class FrameStore:
    """Per-frame, per-key accumulators plus the sliding running state."""

    def __init__(self):
        self.frames = {}  # frame_end -> {key: acc}
        self.running = {}  # key -> acc over the frames of the next window to emit
        self.refcount = {}  # key -> number of frames in ``running`` holding the key
        self.next_window_end = None
        # highest window end already emitted
        self.frontier = None

    def add(self, frame_end, key, acc, combine):
        frame = self.frames.get(frame_end)
        if frame is None:
            self.frames[frame_end] = {key: acc}
        elif key in frame:
            frame[key] = combine(frame[key], acc)
        else:
            frame[key] = acc

    def accumulate(self, frame_end, key, item, agg: AggregateOperation):
        frame = self.frames.get(frame_end)
        if frame is None:
            frame = self.frames[frame_end] = {}
        acc = frame.get(key)
        frame[key] = agg.accumulate(agg.create() if acc is None else acc, item)

    def is_late_frame(self, frame_end) -> bool:
        return self.frontier is not None and frame_end <= self.frontier

    def is_empty(self) -> bool:
        return not self.frames and not self.running


def _add_frame(store, frame, agg):
    running, refcount, combine, create = store.running, store.refcount, agg.combine, agg.create
    for key, acc in frame.items():
        if key in running:
            running[key] = combine(running[key], acc)
            refcount[key] += 1
        else:
            running[key] = combine(create(), acc)
            refcount[key] = 1


def _deduct_frame(store, frame, agg):
    running, refcount, deduct = store.running, store.refcount, agg.deduct
    for key, acc in frame.items():
        left = refcount[key] - 1
        if left:
            refcount[key] = left
            running[key] = deduct(running[key], acc)
        else:
            del refcount[key]
            del running[key]


def _recombine(store, window_end, wdef, agg):
    running = {}
    lo = window_end - wdef.window_size
    for fe in sorted(store.frames):
        if lo < fe <= window_end:
            for key, acc in store.frames[fe].items():
                running[key] = agg.combine(running[key] if key in running else agg.create(), acc)
    return running


def emit_closed_windows(store: FrameStore, wm, wdef: WindowDefinition, agg: AggregateOperation,
                        on_window: Optional[Callable] = None,
                        on_keys_changed: Optional[Callable] = None):
    """Emit every window ending at or before ``wm`` that has not been emitted.

    Without ``on_window`` returns ``[(window_end, {key: result}), ...]``. With
    it, calls ``on_window(window_end, mapping)`` instead, passing the live
    running mapping when the aggregate has no finishing step (the callback
    must not keep or mutate it). Frames no open window needs are evicted.
    On the deduct path ``on_keys_changed(keys)`` reports the keys whose
    running accumulator a slide changed.
    """
    out = [] if on_window is None else None
    frames = store.frames
    slide, size = wdef.slide, wdef.window_size
    W = store.next_window_end
    if W is None:
        if not frames:
            return out
        W = min(frames)
    use_deduct = agg.deduct is not None
    while W <= wm:
        if use_deduct:
            if not store.running:
                # skip a stretch of empty windows
                upcoming = [fe for fe in frames if fe >= W]
                if not upcoming:
                    break
                nxt = min(upcoming)
                if nxt > wm:
                    # keep W: a frame may still arrive inside the gap
                    break
                W = max(W, nxt)
            frame = frames.get(W)
            if frame is not None:
                _add_frame(store, frame, agg)
                if on_keys_changed is not None:
                    on_keys_changed(frame)
            leaving = frames.pop(W - size, None)
            if leaving is not None:
                _deduct_frame(store, leaving, agg)
                if on_keys_changed is not None:
                    on_keys_changed(leaving)
            mapping = store.running
        else:
            if not any(W - size < fe for fe in frames):
                break
            nxt = min(fe for fe in frames if fe > W - size)
            if nxt > W:
                if nxt > wm:
                    break
                W = nxt
            mapping = _recombine(store, W, wdef, agg)
            for fe in [fe for fe in frames if fe <= W + slide - size]:
                del frames[fe]
        if mapping:
            if agg.export_finish is not None:
                mapping = {k: agg.export_finish(v) for k, v in mapping.items()}
            if on_window is not None:
                on_window(W, mapping)
            else:
                out.append((W, dict(mapping)))
        store.frontier = W
        W += slide
    if W <= wm or store.frontier is not None:
        # before the first emission the start stays open: an earlier frame may still arrive
        store.next_window_end = W
    return out


# ---------------------------------------------------------------- processors


class AccumulateByFrameP(Processor):
    """Stage one of a windowed aggregate: per-frame partial accumulators.

    Emits ``(frame_end, key, acc)`` partials once the watermark passes the
    frame end.
    """

    def __init__(self, key_fn, agg: AggregateOperation, wdef: WindowDefinition):
        self.key_fn = key_fn
        self.agg = agg
        self.wdef = wdef
        self.frames = {}
        self.wm = MIN_TIME

    def process(self, ordinal, inbox):
        key_fn, frames, slide = self.key_fn, self.frames, self.wdef.slide
        accumulate, create = self.agg.accumulate, self.agg.create
        wm = self.wm
        late = 0
        for ev in inbox:
            t = ev.event_time
            if t < wm:
                late += 1
                continue
            fe = (t // slide + 1) * slide
            frame = frames.get(fe)
            if frame is None:
                frame = frames[fe] = {}
            payload = ev.payload
            key = key_fn(payload)
            acc = frame.get(key)
            frame[key] = accumulate(create() if acc is None else acc, payload)
        inbox.clear()
        if late:
            self.context.count("dropped_late", late)

    def process_watermark(self, wm):
        self.wm = wm
        frames = self.frames
        ready = sorted(fe for fe in frames if fe <= wm)
        out = []
        for fe in ready:
            t = fe - 1
            out.extend(Event((fe, key, acc), t) for key, acc in frames.pop(fe).items())
        self.outbox.add_all(out)
        return True

    def complete(self):
        return self.process_watermark(MAX_TIME)

    def save_to_snapshot(self):
        per_key = {}
        for fe, frame in self.frames.items():
            for key, acc in frame.items():
                per_key.setdefault(key, {})[fe] = acc
        return per_key.items()

    def restore_from_snapshot(self, entries):
        for key, by_frame in entries:
            for fe, acc in by_frame.items():
                frame = self.frames.setdefault(fe, {})
                frame[key] = self.agg.combine(frame[key], acc) if key in frame else acc


class SlidingCombineP(Processor):
    """Stage two: combines per-frame partials and emits sliding windows.

    With ``window_reducer`` the per-key results of a window are folded into
    one partial per instance, emitted as ``(window_end, partial, emitted_at,
    trigger_time)`` for a :class:`WindowReduceP` downstream. Otherwise each
    key's result is emitted as a :class:`WindowResult`.
    """

    def __init__(self, agg: AggregateOperation, wdef: WindowDefinition,
                 window_reducer: Optional[AggregateOperation] = None, allowed_lag: int = 0,
                 single_stage_key_fn=None, clock=time.time):
        self.agg = agg
        self.wdef = wdef
        self.reducer = window_reducer
        self.allowed_lag = allowed_lag
        self.store = FrameStore()
        self.clock = clock
        # single-stage mode consumes raw events instead of partials
        self.single_stage_key_fn = single_stage_key_fn
        self.wm = MIN_TIME
        self.tracker = None
        if window_reducer is not None and window_reducer.incremental is not None and agg.deduct is not None:
            self.tracker = window_reducer.incremental()

    def _touch(self, keys):
        running, tracker, fin = self.store.running, self.tracker, self.agg.export_finish
        for k in keys:
            v = running.get(k)
            tracker.update(k, None if v is None else v if fin is None else fin(v))

    def process(self, ordinal, inbox):
        store = self.store
        late = 0
        if self.single_stage_key_fn is not None:
            key_fn, slide, agg = self.single_stage_key_fn, self.wdef.slide, self.agg
            wm = self.wm
            for ev in inbox:
                t = ev.event_time
                if t < wm:
                    late += 1
                    continue
                fe = (t // slide + 1) * slide
                if store.is_late_frame(fe):
                    late += 1
                    continue
                store.accumulate(fe, key_fn(ev.payload), ev.payload, agg)
        else:
            combine = self.agg.combine
            frames = store.frames
            frontier = store.frontier
            for ev in inbox:
                fe, key, acc = ev.payload
                if frontier is not None and fe <= frontier:
                    late += 1
                    continue
                frame = frames.get(fe)
                if frame is None:
                    frames[fe] = {key: acc}
                elif key in frame:
                    frame[key] = combine(frame[key], acc)
                else:
                    frame[key] = acc
        inbox.clear()
        if late:
            self.context.count("dropped_late", late)

    def process_watermark(self, wm):
        self.wm = wm
        emitted_at = None
        lag = self.allowed_lag
        out = []
        reducer = self.reducer

        def on_window(window_end, mapping):
            nonlocal emitted_at
            if emitted_at is None:
                emitted_at = self.clock()
            trigger = window_end - 1 + lag
            if self.tracker is not None:
                partial = self.tracker.partial()
                out.append(Event((window_end, partial, emitted_at, trigger), window_end - 1))
            elif reducer is not None:
                if reducer.accumulate_many is not None:
                    partial = reducer.accumulate_many(reducer.create(), mapping)
                else:
                    partial = reducer.create()
                    for pair in mapping.items():
                        partial = reducer.accumulate(partial, pair)
                out.append(Event((window_end, partial, emitted_at, trigger), window_end - 1))
            else:
                t = window_end - 1
                out.extend(
                    Event(WindowResult(window_end, k, v, emitted_at, trigger), t)
                    for k, v in mapping.items()
                )

        emit_closed_windows(
            self.store, wm, self.wdef, self.agg, on_window,
            self._touch if self.tracker is not None else None,
        )
        self.outbox.add_all(out)
        return True

    def complete(self):
        return self.process_watermark(MAX_TIME)

    def save_to_snapshot(self):
        store = self.store
        per_key = {}
        for fe, frame in store.frames.items():
            for key, acc in frame.items():
                per_key.setdefault(key, {})[fe] = acc
        frontier = store.frontier
        return [(key, (frontier, frames)) for key, frames in per_key.items()]

    def restore_from_snapshot(self, entries):
        store = self.store
        for key, (frontier, by_frame) in entries:
            if frontier is not None:
                store.frontier = frontier if store.frontier is None else min(store.frontier, frontier)
            for fe, acc in by_frame.items():
                store.add(fe, key, acc, self.agg.combine)

    def finish_restore(self):
        store = self.store
        if store.frontier is None:
            return
        # rebuild the running accumulators for the window after the frontier
        store.next_window_end = store.frontier + self.wdef.slide
        store.running.clear()
        store.refcount.clear()
        if self.agg.deduct is not None:
            lo = store.frontier - self.wdef.window_size
            for fe in sorted(store.frames):
                if lo < fe <= store.frontier:
                    _add_frame(store, store.frames[fe], self.agg)
            for fe in [fe for fe in store.frames if fe <= lo]:
                del store.frames[fe]
            if self.tracker is not None:
                self.tracker = self.reducer.incremental()
                self._touch(list(store.running))


class WindowReduceP(Processor):
    """Final stage of a reduced window: combines instance partials per window end."""

    def __init__(self, reducer: AggregateOperation):
        self.reducer = reducer
        self.pending = {}  # window_end -> [acc, emitted_at, trigger]
        self.frontier = None

    def process(self, ordinal, inbox):
        pending, combine = self.pending, self.reducer.combine
        frontier = self.frontier
        late = 0
        for ev in inbox:
            end, partial, emitted_at, trigger = ev.payload
            if frontier is not None and end <= frontier:
                late += 1
                continue
            slot = pending.get(end)
            if slot is None:
                pending[end] = [partial, emitted_at, trigger]
            else:
                slot[0] = combine(slot[0], partial)
                if emitted_at is not None and (slot[1] is None or emitted_at < slot[1]):
                    slot[1] = emitted_at
                if trigger is not None and (slot[2] is None or trigger < slot[2]):
                    slot[2] = trigger
        inbox.clear()
        if late:
            self.context.count("dropped_late", late)

    def process_watermark(self, wm):
        ready = sorted(end for end in self.pending if end <= wm)
        finish = self.reducer.finish
        out = []
        for end in ready:
            acc, emitted_at, trigger = self.pending.pop(end)
            out.append(Event(WindowResult(end, None, finish(acc), emitted_at, trigger), end - 1))
            self.frontier = end
        self.outbox.add_all(out)
        return True

    def complete(self):
        return self.process_watermark(MAX_TIME)

    def save_to_snapshot(self):
        entries = [(end, (self.frontier, slot)) for end, slot in self.pending.items()]
        if self.frontier is not None:
            # every instance restores the smallest frontier of all instances
            entries.append((BroadcastKey(("frontier", self.context.global_index)), (self.frontier, None)))
        return entries

    def restore_from_snapshot(self, entries):
        for key, (frontier, slot) in entries:
            if frontier is not None:
                self.frontier = frontier if self.frontier is None else min(self.frontier, frontier)
            if slot is not None:
                self.pending[key] = list(slot)
        if self.frontier is not None:
            for end in [e for e in self.pending if e <= self.frontier]:
                del self.pending[end]


class KeyedAccumulateP(Processor):
    """Stage one of a non-windowed (batch) keyed aggregate."""

    def __init__(self, key_fn, agg: AggregateOperation):
        self.key_fn = key_fn
        self.agg = agg
        self.accs = {}

    def process(self, ordinal, inbox):
        accs, key_fn, accumulate, create = self.accs, self.key_fn, self.agg.accumulate, self.agg.create
        for ev in inbox:
            payload = ev.payload
            key = key_fn(payload)
            acc = accs.get(key)
            accs[key] = accumulate(create() if acc is None else acc, payload)
        inbox.clear()

    def complete(self):
        self.outbox.add_all([Event((k, acc), 0) for k, acc in self.accs.items()])
        self.accs = {}
        return True

    def save_to_snapshot(self):
        return list(self.accs.items())

    def restore_from_snapshot(self, entries):
        for key, acc in entries:
            self.accs[key] = self.agg.combine(self.accs[key], acc) if key in self.accs else acc


class KeyedCombineP(Processor):
    """Stage two of a batch keyed aggregate; emits ``(key, result)`` at completion.

    In single-stage mode (``single_stage_key_fn`` set) it accumulates raw items.
    """

    def __init__(self, agg: AggregateOperation, single_stage_key_fn=None):
        self.agg = agg
        self.accs = {}
        self.single_stage_key_fn = single_stage_key_fn

    def process(self, ordinal, inbox):
        accs, agg = self.accs, self.agg
        if self.single_stage_key_fn is not None:
            key_fn = self.single_stage_key_fn
            for ev in inbox:
                key = key_fn(ev.payload)
                acc = accs.get(key)
                accs[key] = agg.accumulate(agg.create() if acc is None else acc, ev.payload)
        else:
            for ev in inbox:
                key, acc = ev.payload
                accs[key] = agg.combine(accs[key], acc) if key in accs else acc
        inbox.clear()

    def complete(self):
        finish = self.agg.finish
        self.outbox.add_all([Event((k, finish(acc)), 0) for k, acc in self.accs.items()])
        self.accs = {}
        return True

    def save_to_snapshot(self):
        return list(self.accs.items())

    def restore_from_snapshot(self, entries):
        for key, acc in entries:
            self.accs[key] = self.agg.combine(self.accs[key], acc) if key in self.accs else acc


def _first(pair):
    return pair[0]


def _second(triple):
    return triple[1]


def _window_end_of(partial):
    return partial[0]


class TwoStage(NamedTuple):
    accumulate: VertexSpec
    combine: VertexSpec
    # edge from accumulate to combine: distributed, partitioned by key
    inner_edge: EdgeSpec
    # key extractor for the edge feeding the accumulate vertex (local, partitioned)
    input_key_fn: Callable


def split_two_stage(name: str, key_fn: Callable, agg: AggregateOperation,
                    wdef: Optional[WindowDefinition] = None,
                    window_reducer: Optional[AggregateOperation] = None,
                    allowed_lag: int = 0, local_parallelism=None) -> TwoStage:
    """Expand a keyed aggregate into an accumulate vertex and a combine vertex."""
    if agg.combine is None:
        raise ValueError("two-stage aggregation needs a combine function")
    acc_name, comb_name = f"{name}-accumulate", f"{name}-combine"
    if wdef is None:
        acc_v = VertexSpec(acc_name, lambda: KeyedAccumulateP(key_fn, agg), local_parallelism)
        comb_v = VertexSpec(comb_name, lambda: KeyedCombineP(agg), local_parallelism)
        inner_key = _first
    else:
        acc_v = VertexSpec(acc_name, lambda: AccumulateByFrameP(key_fn, agg, wdef), local_parallelism)
        comb_v = VertexSpec(
            comb_name,
            lambda: SlidingCombineP(agg, wdef, window_reducer, allowed_lag),
            local_parallelism,
        )
        inner_key = _second
    inner = EdgeSpec(acc_name, comb_name, routing=PARTITIONED, key_fn=inner_key, scope=DISTRIBUTED)
    return TwoStage(acc_v, comb_v, inner, key_fn)


def reduce_vertex(name: str, reducer: AggregateOperation, local_parallelism=None):
    """Final per-window combining vertex and the key for its inbound edge."""
    return VertexSpec(name, lambda: WindowReduceP(reducer), local_parallelism), _window_end_of


# ------------------------------------------------------------------ oracles


def brute_force_windows(events, key_fn, wdef: WindowDefinition, agg: AggregateOperation):
    """Reference result: for every window end, re-aggregate every event in it."""
    if not events:
        return {}
    ends = set()
    for payload, t in events:
        ends.update(wdef.window_ends_containing(t))
    out = {}
    for W in sorted(ends):
        lo = W - wdef.window_size
        accs = {}
        for payload, t in events:
            if lo <= t < W:
                k = key_fn(payload)
                accs[k] = agg.accumulate(accs[k] if k in accs else agg.create(), payload)
        if accs:
            out[W] = {k: agg.finish(v) for k, v in accs.items()}
    return out


def drain(deque_like) -> list:
    out = list(deque_like)
    deque_like.clear()
    return out


__all__ = [
    "AccumulateByFrameP", "AggregateOperation", "FrameStore", "KeyedAccumulateP", "KeyedCombineP",
    "SlidingCombineP", "TwoStage", "WatermarkCoalescer", "WatermarkPolicy", "WindowDefinition",
    "WindowReduceP", "WindowResult", "assign_frame", "brute_force_windows", "coalesce_watermarks",
    "counting", "emit_closed_windows", "max_with_ties", "reduce_vertex", "sliding", "split_two_stage",
    "summing", "to_list", "tumbling",
]
