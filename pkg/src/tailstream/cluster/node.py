"""A cluster member: membership, heartbeats, the grid and job executions.

The first node starts a cluster and gets id 1. A joining node first
contacts any member. That member forwards the request to the master, which
hands out the next id. The joiner then dials every existing member and
reports back. The master moves the grid onto the new membership and
broadcasts the new view.

The master is the live member with the smallest id, so it is also the
oldest. A member counts as lost when its connection drops or when nothing
has arrived from it for ``heartbeat_timeout_s``. The master then removes it
from the view, rebalances the grid and lets the job coordinators restart
their jobs. If the master itself is lost, the next oldest member takes
over. Any execution still running is cancelled and its job is restarted
from the last complete snapshot.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import Future, wait

from ..grid.store import GridService, GridSnapshotStore
from ..hashing import DEFAULT_PARTITION_COUNT
from ..planner import plan_execution
from ..runtime import NodeExecution
from ..scheduler import EngineConfig, ExecutionService
from ..transport.net import ExchangeRouter, Network, NetworkExchange, PeerLost
from .jobs import JobConfig

log = logging.getLogger(__name__)

C_JOIN = "cluster.join"
C_JOINED = "cluster.joined"
C_VIEW = "cluster.view"
C_HEARTBEAT = "cluster.heartbeat"
C_SHUTDOWN = "cluster.shutdown"
C_INFO = "cluster.info"

J_SUBMIT = "job.submit"
J_WAIT = "job.wait"
J_INIT = "job.init"
J_START = "job.start"
J_SNAPSHOT = "job.snapshot"
J_SNAPSHOT_DONE = "job.snapshot_done"
J_COMMIT = "job.commit"
J_CANCEL = "job.cancel"
J_EXEC_DONE = "job.exec_done"


class NotMaster(RuntimeError):
    pass


class ClusterNode:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, join=None, threads: int = 2,
                 partition_count: int = DEFAULT_PARTITION_COUNT, backup_count: int = 1,
                 heartbeat_s: float = 1.0, heartbeat_timeout_s: float = 5.0, metrics_file=None,
                 window_floor=None, ack_period=None):
        self.join_address = join
        self.threads = threads
        self.heartbeat_s = heartbeat_s
        self.heartbeat_timeout_s = heartbeat_timeout_s
        self.window_floor = window_floor
        self.ack_period = ack_period
        self.network = Network(0, host, port)
        self.grid = GridService(self.network, partition_count, backup_count)
        self.store = GridSnapshotStore(self.grid)
        self.service = ExecutionService(
            EngineConfig(cooperative_thread_count=threads, metrics_file=metrics_file)
        )
        self.router = ExchangeRouter(self.network)
        self.view = {}  # member id -> address
        self.view_version = 0
        self.next_id = 1
        self.executions = {}  # exec key -> NodeExecution
        self.coordinators = {}  # job id -> JobCoordinator (master only)
        self.shutdown_requested = threading.Event()
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._joined = threading.Event()
        h = self.network.handlers
        h[C_JOIN] = self._on_join
        h[C_JOINED] = self._on_joined
        h[C_VIEW] = self._on_view
        h[C_HEARTBEAT] = lambda sender, body: None
        h[C_SHUTDOWN] = self._on_shutdown
        h[C_INFO] = lambda sender, body: self.info()
        h[J_SUBMIT] = self._on_submit
        h[J_WAIT] = self._on_wait
        h[J_INIT] = self._on_init
        h[J_START] = self._on_start
        h[J_SNAPSHOT] = self._on_snapshot
        h[J_COMMIT] = self._on_commit
        h[J_CANCEL] = self._on_cancel
        h[J_SNAPSHOT_DONE] = self._on_snapshot_done
        h[J_EXEC_DONE] = self._on_exec_done
        self.network.on_peer_lost.append(self._peer_lost)

    # ------------------------------------------------------------ lifecycle

    @property
    def node_id(self) -> int:
        return self.network.node_id

    @property
    def address(self) -> str:
        return self.network.address

    @property
    def members(self) -> tuple:
        with self._lock:
            return tuple(sorted(self.view))

    @property
    def master(self):
        members = self.members
        return members[0] if members else None

    @property
    def is_master(self) -> bool:
        return self.master == self.node_id

    def start(self):
        self.network.listen()
        self.service.start(name_prefix=f"coop-{self.network.port}")
        if self.join_address is None:
            self.network.node_id = 1
            with self._lock:
                self.view = {1: self.address}
                self.view_version = 1
                self.next_id = 2
            self.grid.change_membership((1,))
        else:
            self._join(self.join_address)
        self._joined.set()
        threading.Thread(target=self._heartbeat_loop, daemon=True, name="heartbeat").start()
        return self

    def _join(self, seed):
        conn = self.network.connect(seed)
        try:
            new_id, members = self.network.call(conn.peer_id, C_JOIN, self.address)
        finally:
            conn.on_close = None
            conn.close()
            self.network.connections.pop(conn.peer_id, None)
        self.network.node_id = new_id
        with self._lock:
            self.view = dict(members)
        for member_id, address in sorted(members.items()):
            self.network.connect(address)
        master = min(members)
        self.network.call(master, C_JOINED, (new_id, self.address), timeout=60.0)
        log.info("node %s joined; master is %s", new_id, master)

    def wait_for_members(self, count: int, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        while len(self.members) < count:
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {len(self.members)} of {count} members joined")
            time.sleep(0.05)

    def shutdown(self):
        self._stop.set()
        for ex in list(self.executions.values()):
            ex.cancel()
        for c in list(self.coordinators.values()):
            c.stop()
        self.service.shutdown()
        self.grid.shutdown()
        self.network.close()

    def info(self) -> dict:
        return {
            "id": self.node_id,
            "address": self.address,
            "master": self.master,
            "members": {m: a for m, a in sorted(self.view.items())},
            "view_version": self.view_version,
            "executions": sorted(self.executions),
            "grid_table_version": self.grid.table.version if self.grid.table else None,
        }

    # ------------------------------------------------------------ membership

    def _on_join(self, sender, address):
        if not self.is_master:
            return self.network.call(self.master, C_JOIN, address, timeout=60.0)
        with self._lock:
            new_id = self.next_id
            self.next_id += 1
            return new_id, dict(self.view)

    def _on_joined(self, sender, body):
        new_id, address = body
        with self._lock:
            self.view[new_id] = address
            self.view_version += 1
        self.grid.change_membership(self.members)
        self._broadcast_view()
        return True

    def _broadcast_view(self):
        with self._lock:
            body = (self.view_version, dict(self.view), self.next_id)
        for m in self.members:
            if m != self.node_id:
                self.network.notify(m, C_VIEW, body)

    def _on_view(self, sender, body):
        version, view, next_id = body
        lost_master = False
        with self._lock:
            if version <= self.view_version:
                return
            old_master = self.master
            self.view_version = version
            self.view = dict(view)
            self.next_id = next_id
            lost_master = old_master is not None and old_master not in self.view
        for peer in list(self.network.connections):
            if peer > 0 and peer not in view:
                self.network.disconnect(peer)
        if lost_master:
            self._cancel_all_executions()

    def _heartbeat_loop(self):
        while not self._stop.wait(self.heartbeat_s):
            now = time.monotonic()
            for peer, conn in list(self.network.connections.items()):
                if peer <= 0:
                    continue
                self.network.notify(peer, C_HEARTBEAT)
                if now - conn.last_seen > self.heartbeat_timeout_s:
                    log.warning("node %s missed heartbeats for %.1f s", peer, now - conn.last_seen)
                    conn.close()

    def _peer_lost(self, peer):
        if peer <= 0 or self._stop.is_set():
            return
        with self._lock:
            if peer not in self.view:
                return
            was_master = self.master == peer
            del self.view[peer]
            self.view_version += 1
            i_am_master = self.is_master
        log.warning("node %s lost member %s", self.node_id, peer)
        if was_master:
            self._cancel_all_executions()
        if i_am_master:
            threading.Thread(target=self._handle_member_loss, args=(peer, was_master),
                             daemon=True, name="member-loss").start()

    def _handle_member_loss(self, peer, took_over):
        # more members may vanish while the table moves; retry on the latest view
        for attempt in range(5):
            if self._stop.is_set():
                return
            try:
                self.grid.change_membership(self.members)
                break
            except Exception:
                if attempt == 4 and not self._stop.is_set():
                    log.exception("grid rebalance after losing node %s failed", peer)
                time.sleep(0.2)
        self._broadcast_view()
        if took_over:
            from .coordinator import resume_jobs

            resume_jobs(self)
        for c in list(self.coordinators.values()):
            c.on_member_lost(peer)

    def _cancel_all_executions(self):
        for ex in list(self.executions.values()):
            self._cancel(ex)

    def _on_shutdown(self, sender, body):
        self.shutdown_requested.set()
        return True

    # ------------------------------------------------------------ jobs (any member)

    def submit(self, job: JobConfig):
        """Submit a job; returns the job id. Non-masters forward to the master."""
        if self.is_master:
            from .coordinator import JobCoordinator

            c = JobCoordinator.create(self, job)
            c.start()
            return c.job_id
        return self.network.call(self.master, J_SUBMIT, job.to_dict(), timeout=60.0)

    def wait_job(self, job_id, timeout=None) -> dict:
        if self.is_master:
            return self.coordinators[job_id].wait(timeout)
        return self.network.call(self.master, J_WAIT, (job_id, timeout), timeout=(timeout or 3600) + 30)

    def run_job(self, job: JobConfig, timeout=None) -> dict:
        return self.wait_job(self.submit(job), timeout)

    def _on_submit(self, sender, body):
        return self.submit(JobConfig.from_dict(body))

    def _on_wait(self, sender, body):
        job_id, timeout = body
        return self.wait_job(job_id, timeout)

    def _notify_master(self, kind, body):
        master = self.master
        if master == self.node_id:
            handler = self.network.handlers[kind]
            threading.Thread(target=handler, args=(self.node_id, body), daemon=True).start()
        elif master is not None:
            self.network.notify(master, kind, body)

    def _on_init(self, sender, body):
        job_id, exec_key, execution_id, job_dict, members, table, restore_sid, cores = body
        job = JobConfig.from_dict(job_dict)
        dag = job.build_dag()
        plan = plan_execution(dag, members, cores)
        exchange = NetworkExchange(self.network, exec_key, plan.vertex_ids(), ack_period=self.ack_period,
                                   window_floor=self.window_floor)
        me = self.node_id

        def snapshot_done(sid, ok):
            self._notify_master(J_SNAPSHOT_DONE, (exec_key, sid, ok, me))

        def finished(execution):
            self.router.remove(exec_key)
            self.executions.pop(exec_key, None)
            recorder = execution.services.get("latency")
            failure = execution.failure
            self._notify_master(J_EXEC_DONE, {
                "exec_key": exec_key,
                "node": me,
                "failure": None if failure is None else f"{type(failure).__name__}: {failure}",
                "cancelled": execution.control.cancelled,
                "metrics": dict(execution.metrics),
                "histogram": recorder.merged().to_dict() if recorder is not None else None,
            })

        execution = NodeExecution(
            dag, plan, me, job_id=job_id, execution_id=execution_id, guarantee=job.guarantee,
            partition_table=table, store=self.store, exchange=exchange, config=job.config,
            services={}, on_snapshot_done=snapshot_done, on_finished=finished,
        )
        if restore_sid is not None:
            execution.restore(self.store.load(job_id, restore_sid))
        self.router.add(exchange)
        self.executions[exec_key] = execution
        return True

    def _on_start(self, sender, exec_key):
        ex = self.executions.get(exec_key)
        if ex is None:
            raise KeyError(f"unknown execution {exec_key}")
        with self._lock:
            if ex.control.cancelled:
                return False
            ex.started = True
        ex.start(self.service)
        return True

    def _on_snapshot(self, sender, body):
        exec_key, sid = body
        ex = self.executions.get(exec_key)
        if ex is None or ex.control.tracker is None:
            return False
        ex.control.tracker.start(sid)
        ex.control.request_snapshot(sid)
        return True

    def _on_commit(self, sender, body):
        exec_key, sid = body
        ex = self.executions.get(exec_key)
        if ex is not None:
            ex.control.commit(sid)
        return True

    def _on_cancel(self, sender, exec_key):
        ex = self.executions.get(exec_key)
        if ex is not None:
            self._cancel(ex)
        return True

    def _cancel(self, ex):
        with self._lock:
            ex.cancel()
            never_started = not getattr(ex, "started", False)
        if never_started:
            # its tasklets never ran, so nothing else will report the end
            ex.done.set()
            ex.on_finished(ex)

    # ------------------------------------------------------------ coordinator callbacks (master)

    def _coordinator_for(self, exec_key):
        for c in list(self.coordinators.values()):
            if c.exec_key == exec_key:
                return c
        return None

    def _on_snapshot_done(self, sender, body):
        exec_key, sid, ok, node = body
        c = self._coordinator_for(exec_key)
        if c is not None:
            c.on_snapshot_done(sid, ok, node)

    def _on_exec_done(self, sender, body):
        c = self._coordinator_for(body["exec_key"])
        if c is not None:
            c.on_exec_done(body)


def broadcast(node: ClusterNode, members, kind, body, timeout=60.0):
    """Send a request to every member (the local one included) and wait for all replies."""
    futs = []
    for m in members:
        if m == node.node_id:
            f = Future()
            try:
                f.set_result(node.network.handlers[kind](m, body))
            except Exception as e:
                f.set_exception(e)
            futs.append(f)
        else:
            futs.append(node.network.request(m, kind, body))
    done, not_done = wait(futs, timeout)
    if not_done:
        raise TimeoutError(f"{len(not_done)} members did not answer {kind}")
    return [f.result() for f in futs]


__all__ = ["ClusterNode", "NotMaster", "PeerLost", "broadcast"]
