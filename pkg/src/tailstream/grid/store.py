"""The replicated key-value grid running on every cluster member.

Each member keeps the partitions it owns or backs up. All operations on a
partition run on that partition's thread; partition ``p`` is served by
thread ``p % partition_threads``. Writes go to the owner first. The owner
applies them and then replicates to every backup. The caller's future
resolves only after all backups have acknowledged.

Table changes are driven by the master and happen in two steps. First the
master prepares the new table on every member. Each member copies the
partitions it has to hand over and, from then on, also replicates new
writes to the incoming replicas. Then the master commits the new table
everywhere and the old replicas drop the partitions they no longer hold.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from concurrent.futures import Future

from ..hashing import DEFAULT_PARTITION_COUNT, compute_partition_id
from .partition import DataLoss, PartitionTable, build_partition_table, rebalance

log = logging.getLogger(__name__)

G_PUT = "grid.put"
G_BACKUP = "grid.backup"
G_GET = "grid.get"
G_SCAN = "grid.scan"
G_REMOVE = "grid.remove"
G_MIGRATE = "grid.migrate"
G_PREPARE = "grid.prepare"
G_COMMIT = "grid.commit"


class WrongPartitionOwner(RuntimeError):
    def __init__(self, partition, version):
        super().__init__(f"not the owner of partition {partition} in table version {version}")
        self.partition = partition
        self.version = version


class GridTimeout(TimeoutError):
    pass


def partition_of(key, partition_count: int) -> int:
    try:
        return compute_partition_id(key, partition_count)
    except TypeError:
        return compute_partition_id(repr(key), partition_count)


def _matches(key, prefix) -> bool:
    return type(key) is tuple and key[:len(prefix)] == prefix


class PartitionThreads:
    """Runs submitted work for a partition on the thread that owns it."""

    def __init__(self, count: int = 2, name: str = "partition"):
        self.queues = [queue.SimpleQueue() for _ in range(count)]
        self.threads = [
            threading.Thread(target=self._loop, args=(q,), daemon=True, name=f"{name}-{i}")
            for i, q in enumerate(self.queues)
        ]
        for t in self.threads:
            t.start()

    def _loop(self, q):
        while True:
            job = q.get()
            if job is None:
                return
            fn, args, fut = job
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn(*args))
            except BaseException as e:
                fut.set_exception(e)

    def submit(self, partition: int, fn, *args) -> Future:
        fut = Future()
        self.queues[partition % len(self.queues)].put((fn, args, fut))
        return fut

    def shutdown(self):
        for q in self.queues:
            q.put(None)


def _all_of(futures) -> Future:
    """A future resolved once every input future is; fails with the first failure."""
    out = Future()
    futures = list(futures)
    if not futures:
        out.set_result(None)
        return out
    remaining = [len(futures)]
    lock = threading.Lock()

    def done(f):
        exc = f.exception()
        with lock:
            remaining[0] -= 1
            last = remaining[0] == 0
        if out.done():
            return
        if exc is not None:
            try:
                out.set_exception(exc)
            except Exception:
                pass
        elif last:
            try:
                out.set_result(None)
            except Exception:
                pass

    for f in futures:
        f.add_done_callback(done)
    return out


class GridService:
    """One member's share of the grid."""

    def __init__(self, network, partition_count: int = DEFAULT_PARTITION_COUNT, backup_count: int = 1,
                 partition_threads: int = 2, timeout: float = 30.0):
        self.network = network
        self.partition_count = partition_count
        self.backup_count = backup_count
        self.timeout = timeout
        self.table = None
        self.pending = None  # prepared, not yet committed table
        self.data = {}  # partition -> {map name: {key: value}}
        self.threads = PartitionThreads(partition_threads, name=f"partition-{network.node_id}")
        self._table_lock = threading.Lock()
        self._table_changed = threading.Condition()
        h = network.handlers
        h[G_PUT] = self._serve_put
        h[G_BACKUP] = self._serve_backup
        h[G_GET] = self._serve_get
        h[G_SCAN] = self._serve_scan
        h[G_REMOVE] = self._serve_remove
        h[G_MIGRATE] = self._serve_migrate
        h[G_PREPARE] = self._serve_prepare
        h[G_COMMIT] = self._serve_commit

    @property
    def me(self):
        return self.network.node_id

    def shutdown(self):
        self.threads.shutdown()

    # ------------------------------------------------------------ client API

    def put(self, map_name, key, value, partition_key=None, timeout=None):
        self.put_all_async(map_name, [(key, value, partition_key)]).result(timeout or self.timeout)

    def put_all(self, map_name, entries, timeout=None):
        self.put_all_async(map_name, entries).result(timeout or self.timeout)

    def put_all_async(self, map_name, entries) -> Future:
        """Write ``(key, value, partition_key)`` triples; resolves after replication."""
        return self._retrying(lambda: self._put_once(map_name, entries))

    def get(self, map_name, key, partition_key=None, timeout=None):
        pid = partition_of(key if partition_key is None else partition_key, self.partition_count)
        fut = self._retrying(lambda: self._get_once(map_name, key, pid))
        return fut.result(timeout or self.timeout)

    def scan(self, map_name, prefix=(), timeout=None) -> list:
        """``[(key, value)]`` for tuple keys starting with ``prefix``, from every owner."""
        table = self._require_table()
        futs = []
        for node in table.members:
            if node == self.me:
                futs.append(self._local_scan(map_name, prefix))
            else:
                futs.append(self.network.request(node, G_SCAN, (map_name, prefix)))
        out = []
        for f in futs:
            out.extend(f.result(timeout or self.timeout))
        return out

    def remove_where(self, map_name, prefix, below, timeout=None):
        """Delete keys ``prefix + (x, ...)`` with ``x < below`` on every replica."""
        table = self._require_table()
        futs = []
        for node in table.members:
            if node == self.me:
                futs.append(self._local_remove(map_name, prefix, below))
            else:
                futs.append(self.network.request(node, G_REMOVE, (map_name, prefix, below)))
        _all_of(futs).result(timeout or self.timeout)

    def _require_table(self) -> PartitionTable:
        with self._table_changed:
            if self.table is None:
                self._table_changed.wait_for(lambda: self.table is not None, self.timeout)
            if self.table is None:
                raise GridTimeout("no partition table yet")
            return self.table

    def _retrying(self, attempt) -> Future:
        """Retry ``attempt`` while ownership is moving, until the timeout."""
        out = Future()
        deadline = time.monotonic() + self.timeout

        def run():
            try:
                f = attempt()
            except Exception as e:
                out.set_exception(e)
                return
            f.add_done_callback(check)

        def check(f):
            exc = f.exception()
            if exc is None:
                out.set_result(f.result())
                return
            if "WrongPartitionOwner" in repr(exc) and time.monotonic() < deadline:
                timer = threading.Timer(0.02, run)
                timer.daemon = True
                timer.start()
                return
            out.set_exception(exc)

        run()
        return out

    def _put_once(self, map_name, entries) -> Future:
        table = self._require_table()
        by_owner = {}
        for key, value, pkey in entries:
            pid = partition_of(key if pkey is None else pkey, self.partition_count)
            by_owner.setdefault(table.owners[pid], []).append((pid, key, value))
        futs = []
        for owner, rows in by_owner.items():
            if owner == self.me:
                futs.append(self._owner_put(map_name, rows, table.version))
            else:
                futs.append(self.network.request(owner, G_PUT, (map_name, rows, table.version)))
        return _all_of(futs)

    def _get_once(self, map_name, key, pid) -> Future:
        table = self._require_table()
        owner = table.owners[pid]
        if owner == self.me:
            return self.threads.submit(pid, self._read, map_name, key, pid)
        return self.network.request(owner, G_GET, (map_name, key, pid))

    # ------------------------------------------------------------ owner side

    def _replica_targets(self, pid):
        targets = set(self.table.replicas(pid))
        if self.pending is not None:
            targets |= set(self.pending.replicas(pid))
        targets.discard(self.me)
        return targets

    def _owner_put(self, map_name, rows, version) -> Future:
        by_pid = {}
        for pid, key, value in rows:
            by_pid.setdefault(pid, []).append((key, value))
        futs = [self.threads.submit(pid, self._apply_owned, map_name, pid, kv) for pid, kv in by_pid.items()]
        applied = _all_of(futs)
        out = Future()

        def replicate(f):
            if f.exception() is not None:
                out.set_exception(f.exception())
                return
            per_backup = {}
            for fut in futs:
                pid, targets = fut.result()
                for node in targets:
                    per_backup.setdefault(node, []).append((pid, by_pid[pid]))
            acks = [self.network.request(node, G_BACKUP, (map_name, parts)) for node, parts in per_backup.items()]
            _all_of(acks).add_done_callback(
                lambda a: out.set_exception(a.exception()) if a.exception() else out.set_result(len(rows))
            )

        applied.add_done_callback(replicate)
        return out

    def _apply_owned(self, map_name, pid, kv):
        table = self.table
        if table is None or table.owners[pid] != self.me:
            raise WrongPartitionOwner(pid, table.version if table else 0)
        store = self.data.setdefault(pid, {}).setdefault(map_name, {})
        for key, value in kv:
            store[key] = value
        # targets are read on the partition thread, so a concurrent migration
        # copy either contains these rows or is followed by their replication
        return pid, self._replica_targets(pid)

    def _read(self, map_name, key, pid):
        table = self.table
        if table is None or table.owners[pid] != self.me:
            raise WrongPartitionOwner(pid, table.version if table else 0)
        return self.data.get(pid, {}).get(map_name, {}).get(key)

    def _local_scan(self, map_name, prefix) -> Future:
        table = self.table
        owned = [p for p in table.owned_by(self.me)]
        futs = [self.threads.submit(p, self._scan_partition, map_name, p, prefix) for p in owned]
        out = Future()

        def done(f):
            if f.exception() is not None:
                out.set_exception(f.exception())
            else:
                rows = []
                for x in futs:
                    rows.extend(x.result())
                out.set_result(rows)

        _all_of(futs).add_done_callback(done)
        return out

    def _scan_partition(self, map_name, pid, prefix):
        store = self.data.get(pid, {}).get(map_name, {})
        return [(k, v) for k, v in store.items() if _matches(k, prefix)]

    def _local_remove(self, map_name, prefix, below) -> Future:
        n = len(prefix)

        def remove(pid):
            store = self.data.get(pid, {}).get(map_name)
            if not store:
                return 0
            dead = [k for k in store if _matches(k, prefix) and len(k) > n and k[n] < below]
            for k in dead:
                del store[k]
            return len(dead)

        return _all_of([self.threads.submit(p, remove, p) for p in list(self.data)])

    # ------------------------------------------------------------ handlers

    def _serve_put(self, sender, body):
        map_name, rows, _version = body
        return self._owner_put(map_name, rows, _version)

    def _serve_backup(self, sender, body):
        map_name, parts = body

        def apply(pid, kv):
            store = self.data.setdefault(pid, {}).setdefault(map_name, {})
            for key, value in kv:
                store[key] = value

        return _all_of([self.threads.submit(pid, apply, pid, kv) for pid, kv in parts])

    def _serve_get(self, sender, body):
        map_name, key, pid = body
        return self.threads.submit(pid, self._read, map_name, key, pid)

    def _serve_scan(self, sender, body):
        return self._local_scan(*body)

    def _serve_remove(self, sender, body):
        return self._local_remove(*body)

    def _serve_migrate(self, sender, body):
        pid, maps = body

        def install():
            mine = self.data.setdefault(pid, {})
            for name, entries in maps.items():
                store = mine.setdefault(name, {})
                for k, v in entries.items():
                    # entries replicated after the copy was taken are newer
                    store.setdefault(k, v)
            return True

        return self.threads.submit(pid, install)

    def _serve_prepare(self, sender, body):
        table, moves = body
        self.pending = table
        copies = []
        for pid, source, target, _role in moves:
            if source == self.me and target != self.me:
                copies.append(self._copy_out(pid, target))
        return _all_of(copies)

    def _copy_out(self, pid, target) -> Future:
        out = Future()

        def snapshot():
            return {name: dict(entries) for name, entries in self.data.get(pid, {}).items()}

        def send(f):
            if f.exception() is not None:
                out.set_exception(f.exception())
                return
            self.network.request(target, G_MIGRATE, (pid, f.result())).add_done_callback(
                lambda r: out.set_exception(r.exception()) if r.exception() else out.set_result(True)
            )

        self.threads.submit(pid, snapshot).add_done_callback(send)
        return out

    def _serve_commit(self, sender, body):
        version = body
        pending = self.pending
        if pending is None or pending.version != version:
            return False
        self._install(pending)
        return True

    def _install(self, table: PartitionTable):
        with self._table_changed:
            self.table = table
            self.pending = None
            self._table_changed.notify_all()
        for pid in list(self.data):
            if self.me not in table.replicas(pid):
                self.threads.submit(pid, self.data.pop, pid, None)

    # ------------------------------------------------------------ master side

    def change_membership(self, members, timeout=None) -> PartitionTable:
        """Master only: move the grid onto ``members`` (prepare, copy, commit)."""
        members = tuple(members)
        with self._table_lock:
            old = self.table
            if old is not None and tuple(old.members) == members:
                return old
            if old is None:
                backups = min(self.backup_count, len(members) - 1)
                new = build_partition_table(members, self.partition_count, backups)
                moves = []
            else:
                try:
                    new, moves = rebalance(old, members, self.backup_count)
                except DataLoss as e:
                    log.error("grid lost %d partitions: %s", len(e.partitions), e.partitions[:20])
                    new, moves = e.table, e.plan
            wait = timeout or self.timeout
            plain_moves = [tuple(m) for m in moves]
            prep = [
                self._serve_prepare(self.me, (new, plain_moves)) if node == self.me
                else self.network.request(node, G_PREPARE, (new, plain_moves))
                for node in members
            ]
            _all_of(prep).result(wait)
            for node in members:
                if node == self.me:
                    self._serve_commit(self.me, new.version)
                else:
                    self.network.call(node, G_COMMIT, new.version, wait)
            return new

    def adopt(self, table: PartitionTable):
        """Install a table directly (used by a member that takes over as master)."""
        self._install(table)


class GridSnapshotStore:
    """Snapshot storage in the grid; the interface of :class:`MemorySnapshotStore`.

    Entries live in one map partitioned by state key, so each key's state is
    kept by the node that owns the key's partition.
    """

    SNAPSHOTS = "__snapshots"
    JOBS = "__jobs"

    def __init__(self, grid: GridService):
        self.grid = grid

    def write_async(self, job_id, snapshot_id, vertex, instance, entries) -> Future:
        rows = [((job_id, snapshot_id, vertex, instance, key), value, key) for key, value in entries]
        return self.grid.put_all_async(self.SNAPSHOTS, rows)

    def mark_complete(self, job_id, snapshot_id):
        self.grid.put(self.JOBS, ("complete", job_id), snapshot_id)
        try:
            self.grid.remove_where(self.SNAPSHOTS, (job_id,), snapshot_id)
        except Exception as e:  # old snapshots are only garbage; keep going
            log.warning("could not prune snapshots of job %s: %r", job_id, e)

    def last_complete(self, job_id):
        return self.grid.get(self.JOBS, ("complete", job_id))

    def next_execution_id(self, job_id):
        n = (self.grid.get(self.JOBS, ("executions", job_id)) or 0) + 1
        self.grid.put(self.JOBS, ("executions", job_id), n)
        return n

    def load(self, job_id, snapshot_id):
        out = {}
        for (job, sid, vertex, instance, key), value in self.grid.scan(self.SNAPSHOTS, (job_id, snapshot_id)):
            out.setdefault(vertex, []).append((instance, key, value))
        return out
