"""Instantiating an execution plan on one node, and running jobs in-process.

:class:`NodeExecution` turns the node's share of an :class:`ExecutionPlan`
into queues and tasklets. Exchange tasklets are created through an
``exchange`` object supplied by the cluster layer; without one the plan must
be single-node. :func:`run_job` executes a DAG on a single in-process node,
optionally with periodic snapshots into a :class:`MemorySnapshotStore`.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .dag import DagSpec, validate_dag, InvalidDag
from .grid.partition import build_partition_table
from .hashing import compute_partition_id
from .planner import PROCESSOR, RECEIVER, SENDER, plan_execution
from .processor import ProcessorContext
from .scheduler import EngineConfig, ExecutionService
from .snapshot import (
    CheckpointCoordinatorState, MemorySnapshotStore, PriorSnapshotInFlight, SnapshotTracker,
    complete_snapshot, distribute_restore, initiate_snapshot, report_snapshot,
)
from .connectors import FINAL_SNAPSHOT, recover_external_systems
from .tasklets import EXACTLY_ONCE, NONE, ExecutionControl, ProcessorTasklet
from .transport.spsc import SpscQueue

log = logging.getLogger(__name__)


class JobFailed(RuntimeError):
    pass


class JobCancelled(RuntimeError):
    pass


def owned_partitions(table, node, local_index, local_parallelism):
    return tuple(
        p for p, owner in enumerate(table.owners)
        if owner == node and p % local_parallelism == local_index
    )


class NodeExecution:
    """Queues and tasklets of one execution on one node."""

    def __init__(self, dag: DagSpec, plan, node, *, job_id=0, execution_id=0, guarantee=NONE,
                 partition_table=None, store=None, exchange=None, config=None, services=None,
                 inbox_batch=1024, on_snapshot_done=None, on_finished=None):
        self.dag = dag
        self.plan = plan
        self.node = node
        self.job_id = job_id
        self.execution_id = execution_id
        self.table = partition_table or build_partition_table(plan.nodes, backup_count=0)
        self.config = dict(config or {})
        self.services = services if services is not None else {}
        self.metrics = {}
        self.control = ExecutionControl(guarantee)
        self.on_finished = on_finished
        if store is not None and guarantee != NONE:
            self.control.tracker = SnapshotTracker(store, job_id, on_node_done=on_snapshot_done)
        self.queues = {}
        self.tasklets = []
        self.processor_tasklets = []
        self.by_id = {}
        self._open = 0
        self._lock = threading.Lock()
        self.done = threading.Event()
        self._build(exchange, inbox_batch)

    def _build(self, exchange, inbox_batch):
        plan, dag, node = self.plan, self.dag, self.node
        for q in plan.node_queues(node):
            self.queues[q.id] = SpscQueue(q.capacity)
        edges_out = {}
        for e in dag.edges:
            edges_out[(e.source, e.source_ordinal)] = e
        priorities = {}
        for e in dag.edges:
            priorities.setdefault(e.dest, {})[e.dest_ordinal] = e.priority
        specs = plan.tasklets
        for t in plan.node_tasklets(node):
            if t.kind == PROCESSOR:
                v = dag.vertex(t.vertex)
                par = plan.parallelism[t.vertex]
                proc = v.processor_factory()
                if not v.cooperative:
                    proc.cooperative = False
                ctx = ProcessorContext(
                    vertex_name=t.vertex,
                    global_index=t.global_index,
                    local_index=t.local_index,
                    local_parallelism=par,
                    total_parallelism=par * len(plan.nodes),
                    node_id=node,
                    node_ids=tuple(plan.nodes),
                    job_id=self.job_id,
                    execution_id=self.execution_id,
                    guarantee=self.control.guarantee,
                    partition_count=self.table.partition_count,
                    owned_partitions=owned_partitions(self.table, node, t.local_index, par),
                    config=self.config,
                    metrics=self.metrics,
                    services=self.services,
                )
                inbound = {o: [self.queues[q] for q in qids] for o, qids in t.inbound.items()}
                outbound = {}
                for o, qids in t.outbound.items():
                    local, remote = [], {}
                    for qid in qids:
                        consumer = specs[plan.queues[qid].consumer]
                        if consumer.kind == SENDER:
                            remote[consumer.remote_node] = self.queues[qid]
                        else:
                            local.append(self.queues[qid])
                    outbound[o] = (edges_out[(t.vertex, o)], local, remote)
                pt = ProcessorTasklet(
                    t.id, proc, ctx, inbound, outbound, priorities.get(t.vertex, {}),
                    self.control, self.table, node, inbox_batch, vertex=t.vertex,
                )
                pt.spec = t
                self.processor_tasklets.append(pt)
                if self.control.tracker is not None:
                    self.control.tracker.register(pt)
                self._add(pt)
            elif exchange is None:
                raise ValueError("plan has exchange tasklets but no exchange was supplied")
            elif t.kind == SENDER:
                (qid,) = t.inbound[0]
                self._add(exchange.sender(self, t, self.queues[qid]))
            elif t.kind == RECEIVER:
                outs = [
                    [self.queues[q] for q in t.outbound[i]]
                    for i in range(len(t.outbound))
                ]
                self._add(exchange.receiver(self, t, outs))

    def _add(self, tasklet):
        self.tasklets.append(tasklet)
        self.by_id[tasklet.name] = tasklet
        self._wrap_close(tasklet)

    def _wrap_close(self, tasklet):
        original = tasklet.close
        closed = [False]

        def close():
            try:
                original()
            finally:
                if not closed[0]:
                    closed[0] = True
                    self._closed()

        tasklet.close = close
        self._open += 1

    def _closed(self):
        with self._lock:
            self._open -= 1
            last = self._open == 0
        if last:
            self.done.set()
            if self.on_finished is not None:
                self.on_finished(self)

    def restore(self, loaded):
        """Feed restored state; ``loaded`` maps vertex -> [(instance, key, bytes)]."""
        by_vertex = {}
        for pt in self.processor_tasklets:
            by_vertex.setdefault(pt.vertex, []).append(pt)
        for vertex, tasklets in by_vertex.items():
            tasklets.sort(key=lambda t: t.context.local_index)
            entries = loaded.get(vertex, [])
            buckets = distribute_restore(
                entries, len(tasklets), self.table.partition_count, self.table.owners, self.node
            )
            for pt, bucket in zip(tasklets, buckets):
                pt.init()
                if bucket:
                    pt.processor.restore_from_snapshot(bucket)
                pt.processor.finish_restore()

    def start(self, service: ExecutionService):
        coop = [t for t in self.tasklets if getattr(t, "is_cooperative", True)]
        hints = [getattr(getattr(t, "spec", None), "worker", None) for t in coop]
        if coop and all(h is not None for h in hints):
            service.submit(self.tasklets, worker_hint=hints)
        else:
            service.submit(self.tasklets)

    def cancel(self):
        self.control.cancel()

    @property
    def failure(self):
        return self.control.failure


@dataclass
class JobResult:
    duration_s: float
    snapshots_taken: int = 0
    snapshots_abandoned: int = 0
    metrics: dict = field(default_factory=dict)
    execution: Optional[NodeExecution] = None


class LocalCheckpointer:
    """Single-node snapshot coordinator driving one :class:`NodeExecution`."""

    def __init__(self, execution: NodeExecution, store: MemorySnapshotStore, interval_s: float,
                 timeout_s: float = 60.0):
        self.execution = execution
        self.store = store
        self.state = CheckpointCoordinatorState(
            execution.control.guarantee, interval_s, timeout_s
        )
        self._stop = threading.Event()
        self._thread = None
        self.durations = []

    def on_node_done(self, snapshot_id, ok):
        state = self.state
        if not ok:
            return
        if report_snapshot(state, snapshot_id, self.execution.node):
            self.store.mark_complete(self.execution.job_id, snapshot_id)
            self.durations.append(time.monotonic() - state.started_at)
            complete_snapshot(state, snapshot_id)
            self.execution.control.commit(snapshot_id)

    def tick(self):
        try:
            sid = initiate_snapshot(self.state, [self.execution.node])
        except PriorSnapshotInFlight:
            return None
        tracker = self.execution.control.tracker
        tracker.start(sid)
        self.execution.control.request_snapshot(sid)
        return sid

    def _loop(self):
        while not self._stop.wait(self.state.interval_s):
            if self.execution.done.is_set():
                return
            self.tick()

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True, name="checkpointer")
        self._thread.start()

    def stop(self):
        self._stop.set()


def run_job(dag: DagSpec, *, threads: int = 1, guarantee: str = NONE,
            snapshot_interval_s: Optional[float] = None, timeout: float = 120.0,
            service: Optional[ExecutionService] = None, store: Optional[MemorySnapshotStore] = None,
            restore_snapshot: Optional[int] = None, job_id: int = 1, config=None, services=None,
            inbox_batch: int = 1024, wait: bool = True, engine_config: Optional[EngineConfig] = None,
            restart: bool = False):
    """Run ``dag`` on one in-process node and wait for it to finish.

    With ``wait=False`` returns ``(execution, finisher)`` where ``finisher()``
    waits and returns the :class:`JobResult`. ``restart=True`` marks a rerun
    after a crash: external systems first commit what ``restore_snapshot``
    covers and abort everything else.
    """
    errors = validate_dag(dag)
    if errors:
        raise InvalidDag(errors)
    own_service = service is None
    if own_service:
        cfg = engine_config or EngineConfig(cooperative_thread_count=threads)
        service = ExecutionService(cfg).start()
    cores = len(service.workers)
    plan = plan_execution(dag, [0], cores)
    if store is None and guarantee != NONE:
        store = MemorySnapshotStore()
    checkpointer = None
    execution = None

    def on_snapshot_done(sid, ok):
        if checkpointer is not None:
            checkpointer.on_node_done(sid, ok)

    execution_id = store.next_execution_id(job_id) if store is not None else 1
    execution = NodeExecution(
        dag, plan, 0, job_id=job_id, execution_id=execution_id, guarantee=guarantee, store=store, config=config,
        services=services, inbox_batch=inbox_batch, on_snapshot_done=on_snapshot_done,
    )
    if restart:
        recover_external_systems(dag, restore_snapshot)
    if restore_snapshot is not None:
        execution.restore(store.load(job_id, restore_snapshot))
    if guarantee != NONE and snapshot_interval_s:
        checkpointer = LocalCheckpointer(execution, store, snapshot_interval_s)
        # snapshot ids keep increasing across restarts of the same job
        checkpointer.state.current_id = max(restore_snapshot or 0, store.last_complete(job_id) or 0)
        checkpointer.state.last_successful = restore_snapshot or 0
    start = time.monotonic()
    execution.start(service)
    if checkpointer is not None:
        checkpointer.start()

    def finish():
        try:
            if not execution.done.wait(timeout):
                execution.cancel()
                execution.done.wait(5.0)
                raise TimeoutError(f"job did not finish within {timeout} s")
        finally:
            if checkpointer is not None:
                checkpointer.stop()
            if own_service:
                service.shutdown()
        if execution.failure is not None:
            raise JobFailed(repr(execution.failure)) from execution.failure
        if execution.control.cancelled:
            raise JobCancelled("execution was cancelled")
        if guarantee == EXACTLY_ONCE:
            recover_external_systems(dag, FINAL_SNAPSHOT)
        result = JobResult(time.monotonic() - start, execution=execution, metrics=dict(execution.metrics))
        if checkpointer is not None:
            result.snapshots_taken = checkpointer.state.taken
            result.snapshots_abandoned = checkpointer.state.abandoned
        return result

    if wait:
        return finish()
    execution.checkpointer = checkpointer
    return execution, finish
