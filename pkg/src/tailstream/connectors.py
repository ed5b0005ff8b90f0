"""Sources and sinks with the guarantees snapshots rely on.

* :class:`ReplayableSourceP` reads partitioned, offset-addressable input and
  stores per-partition offsets in snapshots.
* :class:`AckQueue` and :class:`AckSourceP` model a system that deletes a
  message only once it is acknowledged; re-sent messages are filtered by a
  :class:`~tailstream.snapshot.DedupIdSet` saved in the snapshot.
* :class:`TxnDirectory` and :class:`TransactionalSinkP` model an external
  store with two-phase commit: output becomes visible only after the
  snapshot covering it completes.
* :class:`IdempotentSinkP` writes keyed results; replays overwrite.
"""

from __future__ import annotations

import heapq
import os
import pickle
import threading
from pathlib import Path

from .hashing import compute_partition_id
from .items import Event, Watermark
from .processor import Processor
from .snapshot import BroadcastKey, DedupIdSet
from .tasklets import EXACTLY_ONCE

FINAL_SNAPSHOT = 1 << 62


def source_partitions_for(context, partition_count_of_source: int):
    """Source partitions this instance reads: those whose grid partition it owns."""
    owned = set(context.owned_partitions)
    return [
        sp for sp in range(partition_count_of_source)
        if compute_partition_id(sp, context.partition_count) in owned
    ]


class ReplayableSourceP(Processor):
    """Reads ``partitions[sp]``: a list of ``(payload, event_time)`` sorted by time.

    Items from the owned partitions are merged by the event time at each
    partition's head. After every batch the source emits a watermark of the
    highest event time seen minus ``allowed_lag``. State: one offset per
    source partition.
    """

    def __init__(self, partitions, batch_size: int = 256, emit_watermarks: bool = True,
                 allowed_lag: int = 0):
        self.partitions = partitions
        self.batch_size = batch_size
        self.emit_watermarks = emit_watermarks
        self.allowed_lag = allowed_lag
        self.max_seen = None
        self.offsets = {}
        self._heap = None
        self.last_time = None

    def init(self, outbox, context):
        super().init(outbox, context)
        for sp in source_partitions_for(context, len(self.partitions)):
            self.offsets.setdefault(sp, 0)

    def _build_heap(self):
        heap = []
        for sp, off in self.offsets.items():
            part = self.partitions[sp]
            if off < len(part):
                heap.append((part[off][1], sp))
        heapq.heapify(heap)
        self._heap = heap

    def complete(self):
        if self._heap is None:
            self._build_heap()
        heap, parts, offsets = self._heap, self.partitions, self.offsets
        out = []
        n = 0
        while heap and n < self.batch_size:
            t, sp = heap[0]
            off = offsets[sp]
            payload, t = parts[sp][off]
            off += 1
            offsets[sp] = off
            if off < len(parts[sp]):
                heapq.heapreplace(heap, (parts[sp][off][1], sp))
            else:
                heapq.heappop(heap)
            out.append(Event(payload, t))
            n += 1
        self.outbox.add_all(out)
        if out and self.emit_watermarks:
            top = max(ev.event_time for ev in out)
            if self.max_seen is None or top > self.max_seen:
                self.max_seen = top
            t = self.max_seen - self.allowed_lag
            if self.last_time is None or t > self.last_time:
                self.last_time = t
                self.outbox.add_watermark(t)
        return not heap

    def save_to_snapshot(self):
        return list(self.offsets.items())

    def restore_from_snapshot(self, entries):
        for sp, off in entries:
            self.offsets[sp] = off
        self._heap = None


class AckQueue:
    """In-memory stand-in for a messaging system with explicit acknowledgment.

    Messages stay available until acked. After a restart every unacked
    message is delivered again, including ones already processed.
    """

    def __init__(self, messages=()):
        self._lock = threading.Lock()
        self.messages = {}  # id -> payload
        self.order = []
        self.acked = set()
        self.redeliveries = 0
        for record_id, payload in messages:
            self.publish(record_id, payload)

    def publish(self, record_id, payload):
        with self._lock:
            self.messages[record_id] = payload
            self.order.append(record_id)

    def unacked(self):
        with self._lock:
            return [(i, self.messages[i]) for i in self.order if i not in self.acked]

    def ack(self, ids):
        with self._lock:
            self.acked.update(ids)

    def is_drained(self):
        with self._lock:
            return len(self.acked) == len(self.order)


class AckSourceP(Processor):
    """Reads every unacked message from an :class:`AckQueue`.

    In exactly-once mode processed ids are remembered in a
    :class:`DedupIdSet` stored in each snapshot; ids delivered before snapshot
    ``n`` are acked once ``n`` commits, then pruned from the set.
    """

    bounded = False

    def __init__(self, queue: AckQueue, batch_size: int = 256):
        self.queue = queue
        self.batch_size = batch_size
        self.dedup = DedupIdSet()
        self.pending_ack = {}  # snapshot id -> ids emitted before its barrier
        self.since_snapshot = []
        self.duplicates = 0
        self._backlog = None

    def init(self, outbox, context):
        super().init(outbox, context)
        self.mine = context.global_index == 0

    def complete(self):
        if not self.mine:
            return True
        if self._backlog is None:
            self._backlog = self.queue.unacked()
            self._pos = 0
        out = []
        end = min(len(self._backlog), self._pos + self.batch_size)
        for record_id, payload in self._backlog[self._pos:end]:
            if not self.dedup.add(record_id):
                self.duplicates += 1
                self.context.count("dedup_filtered")
                continue
            self.since_snapshot.append(record_id)
            out.append(Event(payload, 0))
        self._pos = end
        self.outbox.add_all(out)
        return self._pos >= len(self._backlog)

    def save_to_snapshot(self):
        if not self.mine:
            return []
        return [(BroadcastKey("dedup"), self.dedup.to_list())]

    def snapshot_prepare(self, snapshot_id):
        self.pending_ack[snapshot_id] = self.since_snapshot
        self.since_snapshot = []
        return True

    def restore_from_snapshot(self, entries):
        for _key, ids in entries:
            for i in ids:
                self.dedup.add(i)

    def snapshot_commit(self, snapshot_id, success):
        if not success:
            return
        for sid in sorted(s for s in self.pending_ack if s <= snapshot_id):
            ids = self.pending_ack.pop(sid)
            self.queue.ack(ids)
            self.dedup.prune(ids)


class TxnDirectory:
    """A directory acting as an external transactional store.

    Transactions are sealed as ``*.prepared`` files named after the snapshot
    they belong to and become visible when renamed to ``*.committed``.
    Direct (non-transactional) writers append to ``*.direct`` files.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def _name(self, snapshot_id, execution_id, instance, seq):
        return f"{snapshot_id:020d}-{execution_id}-{instance}-{seq}"

    def prepare(self, snapshot_id, execution_id, instance, seq, records):
        name = self._name(snapshot_id, execution_id, instance, seq)
        tmp = self.path / f"{name}.tmp"
        with open(tmp, "wb") as f:
            pickle.dump(list(records), f, protocol=pickle.HIGHEST_PROTOCOL)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path / f"{name}.prepared")
        return name

    def commit_upto(self, snapshot_id, execution_id=None, instance=None):
        """Commit prepared transactions with id <= ``snapshot_id``.

        With ``execution_id`` and ``instance`` only that writer's transactions
        are touched, so concurrent writers never race on the same file.
        """
        committed = 0
        pattern = "*.prepared" if execution_id is None else f"*-{execution_id}-{instance}-*.prepared"
        for p in sorted(self.path.glob(pattern)):
            sid = int(p.name.split("-", 1)[0])
            if sid <= snapshot_id:
                os.replace(p, p.with_suffix(".committed"))
                committed += 1
        return committed

    def recover(self, snapshot_id):
        """After restoring snapshot ``snapshot_id``: commit what it covers, abort the rest."""
        self.commit_upto(snapshot_id if snapshot_id is not None else -1)
        for p in list(self.path.glob("*.prepared")) + list(self.path.glob("*.tmp")):
            p.unlink()

    def append_direct(self, execution_id, instance, records):
        with open(self.path / f"{execution_id}-{instance}.direct", "ab") as f:
            pickle.dump(list(records), f, protocol=pickle.HIGHEST_PROTOCOL)
            f.flush()

    def committed_records(self):
        out = []
        for p in sorted(self.path.glob("*.committed")):
            with open(p, "rb") as f:
                out.extend(pickle.load(f))
        for p in sorted(self.path.glob("*.direct")):
            with open(p, "rb") as f:
                while True:
                    try:
                        out.extend(pickle.load(f))
                    except EOFError:
                        break
                    except pickle.UnpicklingError:
                        break  # torn tail of a killed writer
        return out


class TransactionalSinkP(Processor):
    """Two-phase-commit sink over a :class:`TxnDirectory`.

    In exactly-once mode each snapshot barrier seals the open transaction
    under that snapshot id and its commit releases it. Without exactly-once
    records are appended directly, visible at once.
    """

    def __init__(self, path, transform=None):
        self.path = str(path)
        self.transform = transform
        self.buffer = []
        self.seq = 0

    def init(self, outbox, context):
        super().init(outbox, context)
        self.store = TxnDirectory(self.path)
        self.transactional = context.guarantee == EXACTLY_ONCE

    def process(self, ordinal, inbox):
        fn = self.transform
        records = [ev.payload if fn is None else fn(ev.payload) for ev in inbox]
        inbox.clear()
        if self.transactional:
            self.buffer.extend(records)
        elif records:
            self.store.append_direct(self.context.execution_id, self.context.global_index, records)

    def _seal(self, snapshot_id):
        self.store.prepare(
            snapshot_id, self.context.execution_id, self.context.global_index, self.seq, self.buffer
        )
        self.seq += 1
        self.buffer = []

    def snapshot_prepare(self, snapshot_id):
        if self.transactional and self.buffer:
            self._seal(snapshot_id)
        return True

    def snapshot_commit(self, snapshot_id, success):
        if self.transactional and success:
            self.store.commit_upto(snapshot_id, self.context.execution_id, self.context.global_index)

    def complete(self):
        if self.transactional and self.buffer:
            # released by the job's final commit once every member finished
            self._seal(FINAL_SNAPSHOT)
        return True

    def recover_external(self, snapshot_id):
        TxnDirectory(self.path).recover(snapshot_id)


class IdempotentStore:
    """Keyed external store; a repeated write of the same key replaces the value."""

    def __init__(self):
        self._lock = threading.Lock()
        self.data = {}
        self.writes = 0

    def put(self, key, value):
        with self._lock:
            self.data[key] = value
            self.writes += 1


class IdempotentSinkP(Processor):
    def __init__(self, store: IdempotentStore, key_fn, value_fn=lambda x: x):
        self.store = store
        self.key_fn = key_fn
        self.value_fn = value_fn

    def process(self, ordinal, inbox):
        for ev in inbox:
            self.store.put(self.key_fn(ev.payload), self.value_fn(ev.payload))
        inbox.clear()


def recover_external_systems(dag, snapshot_id):
    """Run every vertex's ``recover_external`` hook once (commit or abort leftovers)."""
    for v in dag.vertices:
        proc = v.processor_factory()
        hook = getattr(proc, "recover_external", None)
        if hook is not None:
            hook(snapshot_id)


class WatermarkedListSourceP(ReplayableSourceP):
    """Single-partition convenience wrapper over :class:`ReplayableSourceP`."""

    def __init__(self, items, batch_size=256):
        super().__init__([list(items)], batch_size)


__all__ = [
    "AckQueue", "AckSourceP", "FINAL_SNAPSHOT", "IdempotentSinkP", "IdempotentStore",
    "ReplayableSourceP", "TransactionalSinkP", "TxnDirectory", "WatermarkedListSourceP",
    "recover_external_systems", "source_partitions_for", "Watermark",
]
