"""Barrier snapshots: coordination state, per-node progress tracking, storage.

Processor state is saved as ``(state_key, value)`` pairs. Each pair is
stored under ``(job, snapshot_id, vertex, instance, state_key)`` in a map
partitioned by ``state_key``, so a key's state lands on the node that owns
the key and is restored to the instance that will receive that key's
records. State keys wrapped in :class:`BroadcastKey` are restored to every
instance of the vertex instead.
"""

from __future__ import annotations

import logging
import pickle
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Optional

from .hashing import compute_partition_id
from .items import BroadcastKey
from .tasklets import AT_LEAST_ONCE, EXACTLY_ONCE, GUARANTEES, NONE

log = logging.getLogger(__name__)

SNAPSHOT_MAP = "__snapshots"
JOBS_MAP = "__jobs"
DEFAULT_SNAPSHOT_TIMEOUT_S = 60.0


class PriorSnapshotInFlight(RuntimeError):
    pass


class NoCompleteSnapshot(RuntimeError):
    pass


@dataclass
class CheckpointCoordinatorState:
    guarantee: str = EXACTLY_ONCE
    interval_s: float = 1.0
    timeout_s: float = DEFAULT_SNAPSHOT_TIMEOUT_S
    current_id: int = 0
    in_flight: Optional[int] = None
    started_at: float = 0.0
    # members that still have to report for the in-flight snapshot
    waiting: set = field(default_factory=set)
    last_successful: int = 0
    taken: int = 0
    abandoned: int = 0

    def __post_init__(self):
        if self.guarantee not in GUARANTEES:
            raise ValueError(f"unknown guarantee {self.guarantee!r}")


def initiate_snapshot(state: CheckpointCoordinatorState, members, now=None) -> int:
    """Allocate the next snapshot id; raises PriorSnapshotInFlight if one is running."""
    if state.guarantee == NONE:
        raise RuntimeError("snapshots are disabled for guarantee NONE")
    if state.in_flight is not None:
        raise PriorSnapshotInFlight(f"snapshot {state.in_flight} still in flight")
    state.current_id += 1
    state.in_flight = state.current_id
    state.started_at = time.monotonic() if now is None else now
    state.waiting = set(members)
    return state.current_id


def report_snapshot(state: CheckpointCoordinatorState, snapshot_id: int, member) -> bool:
    """Record one member's report; returns True once every member reported."""
    if state.in_flight != snapshot_id:
        return False
    state.waiting.discard(member)
    return not state.waiting


def complete_snapshot(state: CheckpointCoordinatorState, snapshot_id: int):
    if state.in_flight != snapshot_id:
        raise ValueError(f"snapshot {snapshot_id} is not in flight")
    state.in_flight = None
    state.last_successful = snapshot_id
    state.taken += 1


def abandon_snapshot(state: CheckpointCoordinatorState):
    if state.in_flight is not None:
        state.in_flight = None
        state.abandoned += 1


def snapshot_timed_out(state: CheckpointCoordinatorState, now=None) -> bool:
    now = time.monotonic() if now is None else now
    return state.in_flight is not None and now - state.started_at > state.timeout_s


class DedupIdSet:
    """Record ids already processed from an acknowledging source."""

    def __init__(self, ids=()):
        self._ids = set(ids)

    def seen(self, record_id) -> bool:
        return record_id in self._ids

    def add(self, record_id) -> bool:
        """Add an id; returns False when it was already present (a duplicate)."""
        if record_id in self._ids:
            return False
        self._ids.add(record_id)
        return True

    def prune(self, acked_ids):
        """Forget ids the source confirmed as acknowledged; it will not resend them."""
        self._ids.difference_update(acked_ids)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, record_id):
        return record_id in self._ids

    def to_list(self):
        return sorted(self._ids, key=repr)


# ------------------------------------------------------------------ storage


class MemorySnapshotStore:
    """Snapshot storage in a plain dict; used by single-process executions."""

    def __init__(self):
        self.entries = {}
        self.complete = {}  # job -> last complete snapshot id
        self.executions = {}  # job -> executions started so far
        self._lock = threading.Lock()

    def next_execution_id(self, job_id):
        with self._lock:
            n = self.executions.get(job_id, 0) + 1
            self.executions[job_id] = n
            return n

    def write_async(self, job_id, snapshot_id, vertex, instance, entries) -> Future:
        with self._lock:
            for key, value in entries:
                self.entries[(job_id, snapshot_id, vertex, instance, key)] = value
        f = Future()
        f.set_result(len(entries))
        return f

    def mark_complete(self, job_id, snapshot_id):
        with self._lock:
            self.complete[job_id] = snapshot_id
            for k in [k for k in self.entries if k[0] == job_id and k[1] < snapshot_id]:
                del self.entries[k]

    def last_complete(self, job_id):
        return self.complete.get(job_id)

    def load(self, job_id, snapshot_id):
        """``{vertex: [(instance, state_key, value_bytes), ...]}``."""
        out = {}
        with self._lock:
            for (job, sid, vertex, instance, key), value in self.entries.items():
                if job == job_id and sid == snapshot_id:
                    out.setdefault(vertex, []).append((instance, key, value))
        return out


def snapshot_key(job_id, snapshot_id, vertex, instance, state_key):
    return (job_id, snapshot_id, vertex, instance, state_key)


def distribute_restore(entries, parallelism: int, partition_count: int = 271, owners=None, node=None):
    """Group one vertex's restored entries by local instance.

    ``entries`` holds ``(instance, state_key, value_bytes)``. Returns a list
    with one ``[(state_key, value), ...]`` per local instance. Broadcast
    entries go to every instance once, however many instances saved them.
    With ``owners`` (partition id -> node) only keys whose partition
    ``node`` owns are kept.
    """
    per_instance = [[] for _ in range(parallelism)]
    seen_broadcast = set()
    for _instance, key, value in entries:
        if isinstance(key, BroadcastKey):
            if key in seen_broadcast:
                continue
            seen_broadcast.add(key)
            obj = pickle.loads(value)
            for bucket in per_instance:
                bucket.append((key, obj))
        else:
            pid = compute_partition_id(key, partition_count)
            if owners is not None and owners[pid] != node:
                continue
            obj = pickle.loads(value)
            per_instance[pid % parallelism].append((key, obj))
    return per_instance


class SnapshotTracker:
    """Collects per-tasklet snapshot reports on one node for one execution.

    ``on_node_done(snapshot_id)`` fires once every processor tasklet on the
    node has persisted its state for that snapshot. Tasklets that already
    finished are covered by re-writing their final state under each new id.
    """

    def __init__(self, store, job_id, tasklets=(), on_node_done=None):
        self.store = store
        self.job_id = job_id
        self.on_node_done = on_node_done
        self._lock = threading.Lock()
        self._all = set()
        self._finals = {}  # tasklet -> (vertex, instance, entries)
        self._pending = {}  # sid -> set of tasklets still to report
        self._writes = {}  # sid -> outstanding write count
        self._failed = set()
        for t in tasklets:
            self.register(t)

    def register(self, tasklet):
        self._all.add(tasklet)

    def start(self, snapshot_id):
        with self._lock:
            pending = {t for t in self._all if t not in self._finals}
            self._pending[snapshot_id] = pending
            finals = list(self._finals.items())
            self._writes[snapshot_id] = 0
        for t, (vertex, instance, entries) in finals:
            self._write(snapshot_id, t, vertex, instance, entries, report=False)
        self._check(snapshot_id)

    def _instance_of(self, tasklet):
        ctx = getattr(tasklet, "context", None)
        return ctx.global_index if ctx is not None else 0

    def _write(self, snapshot_id, tasklet, vertex, instance, entries, report):
        with self._lock:
            self._writes[snapshot_id] = self._writes.get(snapshot_id, 0) + 1
        fut = self.store.write_async(self.job_id, snapshot_id, vertex, instance, entries)

        def done(f):
            ok = f.exception() is None
            with self._lock:
                self._writes[snapshot_id] -= 1
                if not ok:
                    self._failed.add(snapshot_id)
                if report and snapshot_id in self._pending:
                    self._pending[snapshot_id].discard(tasklet)
            if not ok:
                log.warning("snapshot %s write failed: %r", snapshot_id, f.exception())
            self._check(snapshot_id)

        fut.add_done_callback(done)

    def persist(self, snapshot_id, tasklet, vertex, entries):
        self._write(snapshot_id, tasklet, vertex, self._instance_of(tasklet), entries, report=True)

    def finished(self, tasklet, vertex, entries):
        instance = self._instance_of(tasklet)
        with self._lock:
            self._finals[tasklet] = (vertex, instance, entries)
            owed = [
                sid for sid, pending in self._pending.items()
                if tasklet in pending and getattr(tasklet, "last_snapshot", 0) < sid
            ]
        for sid in owed:
            self._write(sid, tasklet, vertex, instance, entries, report=True)
        # a tasklet that already persisted the pending id just stops counting
        with self._lock:
            for sid, pending in self._pending.items():
                if sid not in owed:
                    pending.discard(tasklet)
            rest = list(self._pending)
        for sid in rest:
            self._check(sid)

    def _check(self, snapshot_id):
        fire = False
        with self._lock:
            pending = self._pending.get(snapshot_id)
            if pending is not None and not pending and self._writes.get(snapshot_id, 0) == 0:
                del self._pending[snapshot_id]
                fire = True
                ok = snapshot_id not in self._failed
        if fire and self.on_node_done is not None:
            self.on_node_done(snapshot_id, ok)

    def outstanding(self):
        with self._lock:
            return {sid: len(p) for sid, p in self._pending.items()}


__all__ = [
    "AT_LEAST_ONCE", "BroadcastKey", "CheckpointCoordinatorState", "DedupIdSet", "EXACTLY_ONCE",
    "MemorySnapshotStore", "NONE", "NoCompleteSnapshot", "PriorSnapshotInFlight", "SnapshotTracker",
    "abandon_snapshot", "complete_snapshot", "distribute_restore", "initiate_snapshot",
    "report_snapshot", "snapshot_key", "snapshot_timed_out",
]
