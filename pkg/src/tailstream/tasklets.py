"""Tasklets that drive processors and move items across node boundaries.

:class:`ProcessorTasklet` implements the inbox/outbox protocol around one
processor instance: it refills the inbox from one inbound channel at a time,
interprets control items itself (watermarks, barriers, end of stream) and
routes the outbox into per-queue pending buffers. New input is taken only
once every pending buffer has been flushed, so a full downstream queue
stalls this tasklet without blocking its thread.
"""

from __future__ import annotations

import logging
import pickle
import time
from collections import deque

from .dag import BROADCAST, PARTITIONED
from .hashing import compute_partition_id
from .items import DONE, MAX_TIME, Barrier, Event, Watermark
from .processor import Outbox
from .scheduler import DONE as STATE_DONE
from .scheduler import MADE_PROGRESS, NO_PROGRESS, Tasklet
from .transport.flow import ACK_PERIOD_S, ReceiveWindowState, SenderWindow, update_receive_window
from .windows import WatermarkCoalescer

log = logging.getLogger(__name__)

NONE = "none"
AT_LEAST_ONCE = "at_least_once"
EXACTLY_ONCE = "exactly_once"
GUARANTEES = (NONE, AT_LEAST_ONCE, EXACTLY_ONCE)


class BarrierOutOfOrder(RuntimeError):
    pass


class ExecutionControl:
    """Flags shared between the tasklets of one execution on one node.

    Plain attribute reads and writes are atomic under the GIL, which is all
    the cross-thread signalling here needs.
    """

    def __init__(self, guarantee: str = NONE, tracker=None):
        if guarantee not in GUARANTEES:
            raise ValueError(f"unknown guarantee {guarantee!r}")
        self.guarantee = guarantee
        self.tracker = tracker
        self.cancelled = False
        self.requested_snapshot = 0
        self.committed_snapshot = 0
        self.failure = None
        self.on_failure = None

    def request_snapshot(self, snapshot_id: int):
        if snapshot_id > self.requested_snapshot:
            self.requested_snapshot = snapshot_id

    def commit(self, snapshot_id: int):
        if snapshot_id > self.committed_snapshot:
            self.committed_snapshot = snapshot_id

    def cancel(self):
        self.cancelled = True

    def fail(self, exc, where=None):
        if self.failure is None:
            self.failure = exc
            log.error("execution failed in %s: %r", where, exc)
            if self.on_failure is not None:
                self.on_failure(exc, where)
        self.cancelled = True

    def persist(self, snapshot_id, tasklet, vertex, entries):
        if self.tracker is not None:
            self.tracker.persist(snapshot_id, tasklet, vertex, entries)

    def finished(self, tasklet, vertex, final_entries):
        if self.tracker is not None:
            self.tracker.finished(tasklet, vertex, final_entries)


class InboundChannel:
    """Consumer side of one inbound queue plus its alignment state."""

    __slots__ = ("queue", "leftover", "done", "blocked", "barrier", "ordinal", "index")

    def __init__(self, queue, ordinal, index):
        self.queue = queue
        self.leftover = None
        self.done = False
        self.blocked = False
        self.barrier = 0
        self.ordinal = ordinal
        self.index = index


class OutboundOrdinal:
    """Routing state for one source ordinal of a processor."""

    __slots__ = ("edge", "routing", "key_fn", "local", "remote", "all", "owners", "node", "rr", "pcount")

    def __init__(self, edge, local, remote, partition_table, node):
        self.edge = edge
        self.routing = edge.routing if edge is not None else BROADCAST
        self.key_fn = edge.key_fn if edge is not None else None
        self.local = local  # queue indices, one per local consumer instance
        self.remote = remote  # remote node -> queue index of its sender
        self.all = list(local) + list(remote.values())
        self.owners = partition_table.owners if (remote and partition_table is not None) else None
        self.pcount = partition_table.partition_count if partition_table is not None else 271
        self.node = node
        self.rr = 0


class _Router:
    """Per-queue pending buffers shared by processor and receiver tasklets."""

    def _init_router(self, queues):
        self.out_queues = queues
        self.pend = [[] for _ in queues]
        self.pend_pos = [0] * len(queues)
        self.dirty = set()
        self.items_out = 0

    def _flush(self) -> int:
        moved = 0
        if not self.dirty:
            return 0
        pend, pos_of, queues = self.pend, self.pend_pos, self.out_queues
        for qi in list(self.dirty):
            buf = pend[qi]
            pos = pos_of[qi]
            n = queues[qi].offer_all(buf, pos)
            pos += n
            moved += n
            if pos >= len(buf):
                buf.clear()
                pos_of[qi] = 0
                self.dirty.discard(qi)
            else:
                pos_of[qi] = pos
        self.items_out += moved
        return moved

    def _pending_count(self) -> int:
        return sum(len(self.pend[qi]) - self.pend_pos[qi] for qi in self.dirty)

    def _route_to(self, o: OutboundOrdinal, items):
        pend = self.pend
        if len(o.all) == 1:
            pend[o.all[0]].extend(items)
            self.dirty.add(o.all[0])
            return
        routing = o.routing
        if routing == BROADCAST:
            for qi in o.all:
                pend[qi].extend(items)
        elif routing == PARTITIONED:
            key_fn, local, pcount = o.key_fn, o.local, o.pcount
            nlocal = len(local)
            owners = o.owners
            if owners is None:
                for ev in items:
                    pend[local[compute_partition_id(key_fn(ev.payload), pcount) % nlocal]].append(ev)
            else:
                me, remote = o.node, o.remote
                for ev in items:
                    p = compute_partition_id(key_fn(ev.payload), pcount)
                    owner = owners[p]
                    if owner == me:
                        pend[local[p % nlocal]].append(ev)
                    else:
                        pend[remote[owner]].append(ev)
        else:
            targets = o.all
            n = len(targets)
            rr = o.rr
            for ev in items:
                pend[targets[rr % n]].append(ev)
                rr += 1
            o.rr = rr % n
        for qi in o.all:
            if pend[qi]:
                self.dirty.add(qi)

    def _emit_control_all(self, item):
        for qi in range(len(self.out_queues)):
            self.pend[qi].append(item)
            self.dirty.add(qi)


def _serialize_entries(entries):
    return [(key, pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)) for key, value in entries]


class ProcessorTasklet(Tasklet, _Router):
    """Drives one processor instance (``drain_and_process`` is :meth:`call`)."""

    def __init__(self, name, processor, context, inbound=None, outbound=None, priorities=None,
                 control=None, partition_table=None, node=0, inbox_batch=1024, vertex=None):
        self.name = name
        self.vertex = vertex or context.vertex_name
        self.processor = processor
        self.context = context
        self.control = control or ExecutionControl()
        self.is_cooperative = getattr(processor, "cooperative", True)
        self.inbox_batch = inbox_batch
        self.bounded = getattr(processor, "bounded", False)

        inbound = inbound or {}
        outbound = outbound or {}
        priorities = priorities or {}
        # inbound channels grouped by priority; lower drains first
        self.channels = []
        self.by_ordinal = {}
        for ordinal in sorted(inbound):
            for q in inbound[ordinal]:
                ch = InboundChannel(q, ordinal, len(self.channels))
                self.channels.append(ch)
                self.by_ordinal.setdefault(ordinal, []).append(ch)
        groups = {}
        for ordinal, chans in self.by_ordinal.items():
            groups.setdefault(priorities.get(ordinal, 0), []).extend(chans)
        self.groups = [groups[p] for p in sorted(groups)]
        self.group_rr = [0] * len(self.groups)
        self.is_source = not self.channels
        self.coalescer = WatermarkCoalescer(len(self.channels))
        self.idle_forwarded = False

        # outbound queues: local consumers first, then senders, per ordinal
        queues = []
        self.outs = {}
        max_ordinal = -1
        for ordinal in sorted(outbound):
            edge, local_qs, remote_qs = outbound[ordinal]
            local_idx = []
            for q in local_qs:
                local_idx.append(len(queues))
                queues.append(q)
            remote_idx = {}
            for n, q in remote_qs.items():
                remote_idx[n] = len(queues)
                queues.append(q)
            self.outs[ordinal] = OutboundOrdinal(edge, local_idx, remote_idx, partition_table, node)
            max_ordinal = max(max_ordinal, ordinal)
        self._init_router(queues)
        self.outbox = Outbox(max_ordinal + 1)

        self.inbox = deque()
        self.inbox_ordinal = 0
        self.step = None
        self.completed = False
        self.reported_finish = False
        self.last_snapshot = 0
        self.last_commit = 0
        self.items_in = 0
        self._initialized = False
        self.own_watermark = float("-inf")

    # lifecycle

    def init(self):
        if not self._initialized:
            self._initialized = True
            self.processor.init(self.outbox, self.context)

    def close(self):
        self.processor.close()

    def fail(self, exc):
        self.control.fail(exc, self.name)

    # output

    def _drain_outbox(self):
        outbox = self.outbox
        buckets = outbox.buckets
        control = outbox.has_control
        outbox.has_control = False
        for ordinal, bucket in enumerate(buckets):
            if bucket:
                o = self.outs.get(ordinal)
                if o is not None:
                    if control:
                        self._route_mixed(o, bucket)
                    else:
                        self._route_to(o, bucket)
                buckets[ordinal] = []

    def _route_mixed(self, o, items):
        """Route a bucket holding watermarks emitted by the processor itself."""
        run = []
        for item in items:
            if item.__class__ is Event:
                run.append(item)
                continue
            if run:
                self._route_to(o, run)
                run = []
            t = item.time
            if t is not None and t <= self.own_watermark:
                continue  # keep per-queue watermarks strictly increasing
            if t is not None:
                self.own_watermark = t
            for qi in o.all:
                self.pend[qi].append(item)
                self.dirty.add(qi)
        if run:
            self._route_to(o, run)

    # control steps (generators resumed on later calls while they yield)

    def _wm_gen(self, t):
        proc = self.processor
        while not proc.process_watermark(t):
            self._drain_outbox()
            yield
        self._drain_outbox()
        self._emit_control_all(Watermark(t))

    def _snapshot_gen(self, sid, terminal=False):
        proc = self.processor
        entries = _serialize_entries(proc.save_to_snapshot())
        while not proc.snapshot_prepare(sid):
            self._drain_outbox()
            yield
        self._drain_outbox()
        self.control.persist(sid, self, self.vertex, entries)
        self.last_snapshot = sid
        self._emit_control_all(Barrier(sid, terminal))
        for ch in self.channels:
            ch.blocked = False

    def _alignment_gen(self):
        if not self.channels:
            return
        target = max(ch.barrier for ch in self.channels)
        if target <= self.last_snapshot:
            return
        for ch in self.channels:
            if not ch.done and ch.barrier < target:
                return
        yield from self._snapshot_gen(target, self._terminal)

    def _complete_gen(self):
        proc = self.processor
        while not proc.complete():
            self._drain_outbox()
            yield
        self._drain_outbox()
        self._emit_control_all(DONE)
        self.completed = True

    def _done_gen(self, ch):
        proc = self.processor
        new = self.coalescer.channel_done(ch.index)
        if new is not None and new != MAX_TIME:
            yield from self._wm_gen(new)
        if all(c.done for c in self.by_ordinal[ch.ordinal]):
            while not proc.complete_edge(ch.ordinal):
                self._drain_outbox()
                yield
            self._drain_outbox()
        yield from self._alignment_gen()
        if all(c.done for c in self.channels):
            yield from self._complete_gen()

    def _barrier_gen(self, ch, barrier):
        sid = barrier.snapshot_id
        if sid <= ch.barrier:
            raise BarrierOutOfOrder(f"{self.name}: barrier {sid} after {ch.barrier}")
        ch.barrier = sid
        self._terminal = barrier.terminal
        if self.control.guarantee == EXACTLY_ONCE:
            ch.blocked = True
        yield from self._alignment_gen()

    _terminal = False

    def _start(self, gen):
        """Run a control step until it first yields; keep it if unfinished."""
        try:
            next(gen)
            self.step = gen
        except StopIteration:
            self.step = None

    def _resume(self):
        try:
            next(self.step)
        except StopIteration:
            self.step = None

    # input selection

    def _take(self):
        """Return ``(channel, batch)`` from the current priority group, or None."""
        for gi, group in enumerate(self.groups):
            if all(ch.done for ch in group):
                continue
            n = len(group)
            start = self.group_rr[gi]
            for k in range(n):
                ch = group[(start + k) % n]
                if ch.done or ch.blocked:
                    continue
                if ch.leftover:
                    batch = ch.leftover
                    ch.leftover = None
                else:
                    batch = ch.queue.poll_batch(self.inbox_batch)
                    if not batch:
                        continue
                self.group_rr[gi] = (start + k + 1) % n
                return ch, batch
            return None
        return None

    def _on_control(self, ch, item):
        cls = item.__class__
        if cls is Watermark:
            t = item.time
            new = self.coalescer.observe(ch.index, t)
            if t is not None:
                self.idle_forwarded = False
            if new is not None:
                self._start(self._wm_gen(new))
            elif t is None and self.coalescer.all_idle() and not self.idle_forwarded:
                self.idle_forwarded = True
                self._emit_control_all(Watermark(None))
        elif cls is Barrier:
            self._start(self._barrier_gen(ch, item))
        elif item is DONE:
            ch.done = True
            self._start(self._done_gen(ch))
        else:
            raise TypeError(f"unexpected item on queue: {item!r}")

    # the tasklet body

    def _source_call(self):
        ctl = self.control
        proc = self.processor
        req = ctl.requested_snapshot
        if req > self.last_snapshot and ctl.guarantee != NONE and not self.bounded:
            self._start(self._snapshot_gen(req))
            if self.step is not None:
                return MADE_PROGRESS
        before = self.items_out + self._pending_count()
        if proc.complete():
            self._drain_outbox()
            self._emit_control_all(DONE)
            self.completed = True
        else:
            self._drain_outbox()
        self._flush()
        if self.completed:
            return MADE_PROGRESS
        return MADE_PROGRESS if self.items_out + self._pending_count() > before else NO_PROGRESS

    def _finish(self):
        if not self.reported_finish:
            self.reported_finish = True
            entries = _serialize_entries(self.processor.save_to_snapshot())
            self.control.finished(self, self.vertex, entries)
        return STATE_DONE

    def call(self):
        ctl = self.control
        if ctl.cancelled:
            return STATE_DONE
        if ctl.committed_snapshot > self.last_commit:
            self.last_commit = ctl.committed_snapshot
            self.processor.snapshot_commit(self.last_commit, True)
        progressed = False
        if self.dirty:
            if self._flush():
                progressed = True
            if self.dirty:
                return MADE_PROGRESS if progressed else NO_PROGRESS
        if self.completed:
            return self._finish()
        if self.inbox:
            n = len(self.inbox)
            self.processor.process(self.inbox_ordinal, self.inbox)
            self.items_in += n - len(self.inbox)
            self._drain_outbox()
            self._flush()
            return MADE_PROGRESS
        if self.step is not None:
            self._resume()
            self._flush()
            return MADE_PROGRESS
        if self.is_source:
            state = self._source_call()
            return MADE_PROGRESS if progressed else state
        taken = self._take()
        if taken is None:
            return MADE_PROGRESS if progressed else NO_PROGRESS
        ch, batch = taken
        cut = 0
        for item in batch:
            if item.__class__ is not Event:
                break
            cut += 1
        if cut:
            if cut < len(batch):
                ch.leftover = batch[cut:]
                batch = batch[:cut]
            inbox = self.inbox
            inbox.extend(batch)
            self.inbox_ordinal = ch.ordinal
            self.processor.process(ch.ordinal, inbox)
            self.items_in += cut - len(inbox)
            self._drain_outbox()
        else:
            if len(batch) > 1:
                ch.leftover = batch[1:]
            self._on_control(ch, batch[0])
        self._flush()
        return MADE_PROGRESS


class SenderTasklet(Tasklet):
    """Ships one producer instance's items for one distributed edge to one node.

    ``transmit(first_seq, items)`` hands a batch to the connection writer;
    the receive window bounds how far ahead of the last ack it may go.
    """

    def __init__(self, name, queue, transmit, control=None, window=None, batch=1024):
        self.name = name
        self.queue = queue
        self.transmit = transmit
        self.control = control or ExecutionControl()
        self.window = window or SenderWindow()
        self.batch = batch
        self.next_seq = 1
        self.finished = False

    def fail(self, exc):
        self.control.fail(exc, self.name)

    def call(self):
        if self.control.cancelled or self.finished:
            return STATE_DONE
        allow = self.window.limit - self.next_seq + 1
        if allow <= 0:
            return NO_PROGRESS
        items = self.queue.poll_batch(min(allow, self.batch))
        if not items:
            return NO_PROGRESS
        self.transmit(self.next_seq, items)
        self.next_seq += len(items)
        if items[-1] is DONE:
            self.finished = True
            return STATE_DONE
        return MADE_PROGRESS

    def in_flight(self) -> int:
        return self.next_seq - 1 - self.window.acked_seq


class ReceiverTasklet(Tasklet, _Router):
    """Feeds items arriving from one remote node into local consumer queues.

    ``outs[i]`` lists the local consumer queues for remote producer instance
    ``i``. The connection reader thread calls :meth:`deliver`; the tasklet
    routes within the node and sends an ack per producer instance every ack
    period through ``send_ack(AckMessage)``.
    """

    def __init__(self, name, edge, outs, send_ack, control=None, ack_period=ACK_PERIOD_S,
                 clock=time.monotonic, batch=1024, window_floor=None, window_ceiling=None):
        self.name = name
        self.edge = edge
        self.control = control or ExecutionControl()
        self.send_ack = send_ack
        self.ack_period = ack_period
        self.clock = clock
        self.batch = batch
        queues = []
        self.instance_outs = []
        for i, qs in enumerate(outs):
            idx = []
            for q in qs:
                idx.append(len(queues))
                queues.append(q)
            o = OutboundOrdinal(edge, idx, {}, None, None)
            self.instance_outs.append(o)
        self._init_router(queues)
        self.inbox = deque()
        self.received = 0  # written by the network thread only
        self.taken = 0  # written by the tasklet only
        self.max_buffered = 0
        kwargs = {}
        if window_floor is not None:
            kwargs["floor"] = window_floor
        if window_ceiling is not None:
            kwargs["ceiling"] = window_ceiling
        self.windows = [
            ReceiveWindowState(ordinal=edge.dest_ordinal if edge else 0, sender_instance=i, **kwargs)
            for i in range(len(outs))
        ]
        self.processed = [0] * len(outs)
        self.unflushed = [0] * len(outs)
        self.last_acked = [0] * len(outs)
        self.done_count = 0
        self.last_ack_time = None
        self.window_log = []  # (time, sender_instance, window_size, rate)

    def deliver(self, sender_instance, first_seq, items):
        """Called from the connection reader thread."""
        self.inbox.append((sender_instance, items))
        self.received += len(items)

    def buffered(self) -> int:
        return self.received - self.taken

    def fail(self, exc):
        self.control.fail(exc, self.name)

    def _maybe_ack(self, now):
        if self.last_ack_time is None:
            self.last_ack_time = now
            return
        elapsed = now - self.last_ack_time
        if elapsed < self.ack_period:
            return
        self.last_ack_time = now
        for i, state in enumerate(self.windows):
            delta = self.processed[i] - self.last_acked[i]
            self.last_acked[i] = self.processed[i]
            ack = update_receive_window(state, delta, elapsed)
            self.window_log.append((now, i, state.window_size, state.observed_rate))
            if len(self.window_log) > 100_000:
                del self.window_log[:50_000]
            self.send_ack(ack)

    def call(self):
        if self.control.cancelled:
            return STATE_DONE
        now = self.clock()
        progressed = False
        if self.dirty:
            if self._flush():
                progressed = True
            if self.dirty:
                self._maybe_ack(now)
                return MADE_PROGRESS if progressed else NO_PROGRESS
        for i, n in enumerate(self.unflushed):
            if n:
                self.processed[i] += n
                self.unflushed[i] = 0
        buffered = self.buffered()
        if buffered > self.max_buffered:
            self.max_buffered = buffered
        if self.done_count == len(self.instance_outs) and not self.inbox:
            self._maybe_ack(now)
            return STATE_DONE
        taken = 0
        inbox = self.inbox
        while inbox and taken < self.batch:
            i, items = inbox.popleft()
            taken += len(items)
            o = self.instance_outs[i]
            run = []
            for item in items:
                if item.__class__ is Event:
                    run.append(item)
                    continue
                if run:
                    self._route_to(o, run)
                    run = []
                for qi in o.all:
                    self.pend[qi].append(item)
                    self.dirty.add(qi)
                if item is DONE:
                    self.done_count += 1
            if run:
                self._route_to(o, run)
            self.unflushed[i] += len(items)
        self.taken += taken
        if taken:
            progressed = True
            self._flush()
        self._maybe_ack(now)
        return MADE_PROGRESS if progressed else NO_PROGRESS
