"""Job coordination on the master node.

A job runs as a sequence of executions. Each execution is planned on the
current members and initialised everywhere (``J_INIT``, restoring state
when there is a snapshot to restore). It is then started everywhere
(``J_START``). While it runs, the coordinator asks every member for a
snapshot each interval. It marks the snapshot complete in the grid once all
members have reported, then tells them to commit.

When a member is lost, the coordinator cancels the execution on the
survivors and waits for them to stop. External systems are then reconciled
with the last complete snapshot, and a new execution restores it on the
remaining members.
"""

from __future__ import annotations

import logging
import threading
import time

from ..connectors import FINAL_SNAPSHOT, recover_external_systems
from ..nexmark.histogram import LatencyHistogram
from ..snapshot import (
    CheckpointCoordinatorState, PriorSnapshotInFlight, abandon_snapshot, complete_snapshot,
    initiate_snapshot, report_snapshot, snapshot_timed_out,
)
from .jobs import JobConfig
from .node import J_CANCEL, J_COMMIT, J_INIT, J_SNAPSHOT, J_START, broadcast

log = logging.getLogger(__name__)

RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
CANCELLED = "cancelled"

JOB_RECORD = "job"


class JobCoordinator:
    def __init__(self, node, job_id: int, job: JobConfig):
        self.node = node
        self.job_id = job_id
        self.job = job
        self.dag = job.build_dag()
        self.status = RUNNING
        self.failure = None
        self.exec_key = None
        self.members = ()
        self.reported = {}  # node -> exec-done body for the current execution
        self.restarting = False
        self._restart_scheduled = False
        self.restarts = 0
        self.metrics = {}
        self.histogram = LatencyHistogram()
        self.started_at = time.monotonic()
        self.finished_at = None
        self.state = CheckpointCoordinatorState(
            job.guarantee if job.snapshots_enabled else "exactly_once",
            job.snapshot_interval_ms / 1000.0 or 1.0, job.snapshot_timeout_s,
        )
        self.snapshot_durations = []
        self._done = threading.Event()
        self._lock = threading.RLock()
        self._stop = threading.Event()

    @classmethod
    def create(cls, node, job: JobConfig, job_id=None):
        store = node.store
        if job_id is None:
            job_id = (node.grid.get(store.JOBS, ("next_job",)) or 0) + 1
            node.grid.put(store.JOBS, ("next_job",), job_id)
        node.grid.put(store.JOBS, (JOB_RECORD, job_id), {"config": job.to_dict(), "status": RUNNING})
        c = cls(node, job_id, job)
        node.coordinators[job_id] = c
        return c

    # ------------------------------------------------------------ executions

    def start(self, restore_sid=None):
        last = self.node.store.last_complete(self.job_id)
        if last is not None:
            self.state.current_id = max(self.state.current_id, last)
            self.state.last_successful = last
        threading.Thread(target=self._launch, args=(restore_sid,), daemon=True,
                         name=f"job-{self.job_id}-launch").start()
        if self.job.snapshots_enabled:
            threading.Thread(target=self._snapshot_loop, daemon=True, name=f"job-{self.job_id}-snap").start()

    def _launch(self, restore_sid):
        try:
            self._launch_once(restore_sid)
        except Exception as e:
            log.exception("job %s could not start an execution", self.job_id)
            if self.restarting or self._members_changed():
                self._schedule_restart()
            else:
                self._finish(FAILED, f"{type(e).__name__}: {e}")

    def _members_changed(self):
        return tuple(self.node.members) != tuple(self.members)

    def _launch_once(self, restore_sid):
        node = self.node
        table = node.grid.table
        members = tuple(table.members)
        execution_id = node.store.next_execution_id(self.job_id)
        exec_key = (self.job_id << 20) | execution_id
        with self._lock:
            self.exec_key = exec_key
            self.members = members
            self.reported = {}
            self.restarting = False
            self._restart_scheduled = False
        body = (self.job_id, exec_key, execution_id, self.job.to_dict(), members, table, restore_sid,
                node.threads)
        log.info("job %s execution %s on %s (restore %s)", self.job_id, execution_id, members, restore_sid)
        broadcast(node, members, J_INIT, body, timeout=120.0)
        broadcast(node, members, J_START, exec_key, timeout=60.0)

    def _snapshot_loop(self):
        state = self.state
        while not self._stop.wait(state.interval_s):
            if self._done.is_set():
                return
            with self._lock:
                if self.restarting or self.exec_key is None:
                    continue
                if snapshot_timed_out(state):
                    log.warning("job %s: snapshot %s timed out", self.job_id, state.in_flight)
                    abandon_snapshot(state)
                try:
                    sid = initiate_snapshot(state, self.members)
                except PriorSnapshotInFlight:
                    continue
                exec_key, members = self.exec_key, self.members
            for m in members:
                if m == self.node.node_id:
                    self.node.network.handlers[J_SNAPSHOT](m, (exec_key, sid))
                else:
                    self.node.network.notify(m, J_SNAPSHOT, (exec_key, sid))

    def on_snapshot_done(self, sid, ok, member):
        with self._lock:
            state = self.state
            if state.in_flight != sid:
                return
            if not ok:
                abandon_snapshot(state)
                return
            if not report_snapshot(state, sid, member):
                return
            started = state.started_at
        try:
            self.node.store.mark_complete(self.job_id, sid)
        except Exception:
            log.exception("job %s: could not record snapshot %s", self.job_id, sid)
            with self._lock:
                abandon_snapshot(self.state)
            return
        with self._lock:
            if self.state.in_flight != sid:
                return
            complete_snapshot(self.state, sid)
            self.snapshot_durations.append(time.monotonic() - started)
            exec_key, members = self.exec_key, self.members
        for m in members:
            if m == self.node.node_id:
                self.node.network.handlers[J_COMMIT](m, (exec_key, sid))
            else:
                self.node.network.notify(m, J_COMMIT, (exec_key, sid))

    def on_exec_done(self, body):
        with self._lock:
            if body["exec_key"] != self.exec_key:
                return
            self.reported[body["node"]] = body
            self._merge(body)
            waiting = [m for m in self.members if m not in self.reported and m in self.node.members]
            if waiting:
                return
            if self.restarting:
                return
            failures = [b["failure"] for b in self.reported.values() if b["failure"]]
            lost = [m for m in self.members if m not in self.node.members]
            cancelled = any(b["cancelled"] for b in self.reported.values())
        if lost:
            self._schedule_restart()
        elif failures:
            self._finish(FAILED, failures[0])
        elif cancelled:
            self._finish(CANCELLED, None)
        else:
            self._complete()

    def _merge(self, body):
        for k, v in (body.get("metrics") or {}).items():
            if isinstance(v, (int, float)):
                self.metrics[k] = self.metrics.get(k, 0) + v
        if body.get("histogram"):
            self.histogram.merge(LatencyHistogram.from_dict(body["histogram"]))

    def _complete(self):
        if self.job.guarantee == "exactly_once":
            recover_external_systems(self.dag, FINAL_SNAPSHOT)
        self._finish(COMPLETED, None)

    def on_member_lost(self, peer):
        with self._lock:
            if self._done.is_set() or peer not in self.members:
                return
            abandon_snapshot(self.state)
        self._schedule_restart()

    def _schedule_restart(self):
        with self._lock:
            self.restarting = True
            if self._restart_scheduled:
                return
            self._restart_scheduled = True
        threading.Thread(target=self._restart, daemon=True, name=f"job-{self.job_id}-restart").start()

    def _restart(self):
        node = self.node
        survivors = [m for m in self.members if m in node.members]
        exec_key = self.exec_key
        for m in survivors:
            if m == node.node_id:
                node.network.handlers[J_CANCEL](m, exec_key)
            else:
                node.network.notify(m, J_CANCEL, exec_key)
        # wait for the survivors to stop before touching external systems
        deadline = time.monotonic() + 30.0
        while time.monotonic() < deadline:
            with self._lock:
                if all(m in self.reported or m not in node.members for m in survivors):
                    break
            time.sleep(0.02)
        # the grid must already be on the new membership
        while tuple(node.grid.table.members) != tuple(node.members) and time.monotonic() < deadline:
            time.sleep(0.02)
        if self._done.is_set():
            return
        last = node.store.last_complete(self.job_id) if self.job.snapshots_enabled else None
        with self._lock:
            self.restarts += 1
            self.state.in_flight = None
        log.warning("job %s restarting from snapshot %s on %s", self.job_id, last, node.members)
        recover_external_systems(self.dag, last)
        self._launch(last)

    def _finish(self, status, failure):
        with self._lock:
            if self._done.is_set():
                return
            self.status = status
            self.failure = failure
            self.finished_at = time.monotonic()
        self._stop.set()
        try:
            self.node.grid.put(self.node.store.JOBS, (JOB_RECORD, self.job_id),
                               {"config": self.job.to_dict(), "status": status})
        except Exception:
            log.warning("could not record the final status of job %s", self.job_id)
        self._done.set()

    def stop(self):
        self._stop.set()

    def cancel(self):
        exec_key = self.exec_key
        for m in self.members:
            if m == self.node.node_id:
                self.node.network.handlers[J_CANCEL](m, exec_key)
            else:
                self.node.network.notify(m, J_CANCEL, exec_key)

    def wait(self, timeout=None) -> dict:
        if not self._done.wait(timeout if timeout is not None else self.job.timeout_s):
            self.cancel()
            raise TimeoutError(f"job {self.job_id} did not finish in time")
        return self.result()

    def result(self) -> dict:
        h = self.histogram
        return {
            "job_id": self.job_id,
            "status": self.status,
            "failure": self.failure,
            "duration_s": (self.finished_at or time.monotonic()) - self.started_at,
            "restarts": self.restarts,
            "snapshots_taken": self.state.taken,
            "snapshots_abandoned": self.state.abandoned,
            "last_snapshot": self.state.last_successful,
            "metrics": dict(self.metrics),
            "histogram": h.to_dict() if h.total else None,
        }


def resume_jobs(node):
    """After a master change: restart every job recorded as running."""
    store = node.store
    for key, record in node.grid.scan(store.JOBS, (JOB_RECORD,)):
        job_id = key[1]
        if record["status"] != RUNNING or job_id in node.coordinators:
            continue
        job = JobConfig.from_dict(record["config"])
        c = JobCoordinator(node, job_id, job)
        node.coordinators[job_id] = c
        last = store.last_complete(job_id) if job.snapshots_enabled else None
        log.warning("new master %s resumes job %s from snapshot %s", node.node_id, job_id, last)
        recover_external_systems(c.dag, last)
        c.start(restore_sid=last)
