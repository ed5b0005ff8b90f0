"""Expansion of a logical DAG into a physical, per-node execution plan.

Every node runs the complete graph: each cooperative vertex gets its local
parallelism worth of instances on every member. Local edges become one
SPSC queue per (producer instance, consumer instance) pair on the same node.
A distributed edge additionally gets a sender tasklet per (producer
instance, remote node) and a receiver tasklet per (remote node) on the
consuming side; the receiver feeds one queue per (remote producer instance,
local consumer instance) so every upstream instance stays a separate
channel for watermark coalescing and barrier alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .dag import BROADCAST, DISTRIBUTED, PARTITIONED, DagSpec, EdgeSpec
from .hashing import compute_partition_id
from .items import Event

PROCESSOR = "processor"
SENDER = "sender"
RECEIVER = "receiver"


class NoCores(ValueError):
    pass


class EmptyCluster(ValueError):
    pass


class MissingKey(ValueError):
    pass


@dataclass
class QueueSpec:
    id: int
    edge: EdgeSpec
    node: int
    producer: str
    consumer: str
    capacity: int
    # the upstream processor instance whose items travel through this queue
    origin_node: int
    origin_index: int


@dataclass
class TaskletSpec:
    id: str
    kind: str
    node: int
    vertex: Optional[str] = None
    local_index: int = 0
    global_index: int = 0
    cooperative: bool = True
    worker: Optional[int] = None
    # processor tasklets: dest ordinal -> list of queue ids (one per upstream channel)
    inbound: dict = field(default_factory=dict)
    # processor tasklets: source ordinal -> list of queue ids
    outbound: dict = field(default_factory=dict)
    # exchange tasklets
    edge: Optional[EdgeSpec] = None
    remote_node: Optional[int] = None


@dataclass
class ExecutionPlan:
    dag: DagSpec
    nodes: tuple
    cores_per_node: int
    parallelism: dict  # vertex name -> local parallelism
    tasklets: dict = field(default_factory=dict)  # id -> TaskletSpec
    queues: dict = field(default_factory=dict)  # id -> QueueSpec

    def node_tasklets(self, node):
        return [t for t in self.tasklets.values() if t.node == node]

    def workers(self, node):
        """Per-worker lists of cooperative tasklet ids plus the non-cooperative ids."""
        lists = [[] for _ in range(self.cores_per_node)]
        dedicated = []
        for t in self.node_tasklets(node):
            if t.cooperative:
                lists[t.worker].append(t.id)
            else:
                dedicated.append(t.id)
        return lists, dedicated

    def node_queues(self, node):
        return [q for q in self.queues.values() if q.node == node]

    def vertex_ids(self):
        """Stable numeric vertex ids used on the wire."""
        return {v.name: i for i, v in enumerate(self.dag.vertices)}

    def senders(self, node):
        return [t for t in self.node_tasklets(node) if t.kind == SENDER]

    def receivers(self, node):
        return [t for t in self.node_tasklets(node) if t.kind == RECEIVER]


def instance_id(vertex, node, local_index):
    return f"{vertex}@{node}#{local_index}"


def sender_id(edge, node, local_index, remote):
    return f"send:{edge.name}@{node}#{local_index}->{remote}"


def receiver_id(edge, node, remote):
    return f"recv:{edge.name}@{node}<-{remote}"


def plan_execution(dag: DagSpec, cluster, cores_per_node: int) -> ExecutionPlan:
    """Build the physical plan for ``dag`` on the members in ``cluster``."""
    if cores_per_node < 1:
        raise NoCores(f"cores_per_node must be >= 1, got {cores_per_node}")
    nodes = tuple(cluster)
    if not nodes:
        raise EmptyCluster("cannot plan on an empty cluster")
    if len(set(nodes)) != len(nodes):
        raise ValueError("duplicate member ids")

    parallelism = {v.name: v.parallelism(cores_per_node) for v in dag.vertices}
    plan = ExecutionPlan(dag, nodes, cores_per_node, parallelism)
    order = dag.topological_order()
    position = {n: i for i, n in enumerate(nodes)}

    for node in nodes:
        rr = 0
        for name in order:
            v = dag.vertex(name)
            par = parallelism[name]
            for i in range(par):
                t = TaskletSpec(
                    id=instance_id(name, node, i),
                    kind=PROCESSOR,
                    node=node,
                    vertex=name,
                    local_index=i,
                    global_index=position[node] * par + i,
                    cooperative=v.cooperative,
                )
                if v.cooperative:
                    t.worker = rr % cores_per_node
                    rr += 1
                plan.tasklets[t.id] = t
        # exchange tasklets take the following worker slots
        for e in dag.edges:
            if e.scope != DISTRIBUTED or len(nodes) == 1:
                continue
            for remote in nodes:
                if remote == node:
                    continue
                for i in range(parallelism[e.source]):
                    s = TaskletSpec(
                        id=sender_id(e, node, i, remote),
                        kind=SENDER,
                        node=node,
                        vertex=e.source,
                        local_index=i,
                        global_index=position[node] * parallelism[e.source] + i,
                        worker=rr % cores_per_node,
                        edge=e,
                        remote_node=remote,
                    )
                    rr += 1
                    plan.tasklets[s.id] = s
                r = TaskletSpec(
                    id=receiver_id(e, node, remote),
                    kind=RECEIVER,
                    node=node,
                    vertex=e.dest,
                    worker=rr % cores_per_node,
                    edge=e,
                    remote_node=remote,
                )
                rr += 1
                plan.tasklets[r.id] = r

    qid = 0

    def add_queue(e, node, producer, consumer, origin_node, origin_index):
        nonlocal qid
        q = QueueSpec(qid, e, node, producer, consumer, e.queue_capacity, origin_node, origin_index)
        plan.queues[qid] = q
        qid += 1
        return q

    for node in nodes:
        for e in dag.edges:
            src_par = parallelism[e.source]
            dst_par = parallelism[e.dest]
            remote_nodes = [n for n in nodes if n != node] if e.scope == DISTRIBUTED else []
            for i in range(src_par):
                producer = plan.tasklets[instance_id(e.source, node, i)]
                out = producer.outbound.setdefault(e.source_ordinal, [])
                for j in range(dst_par):
                    consumer = plan.tasklets[instance_id(e.dest, node, j)]
                    q = add_queue(e, node, producer.id, consumer.id, node, i)
                    out.append(q.id)
                    consumer.inbound.setdefault(e.dest_ordinal, []).append(q.id)
                for remote in remote_nodes:
                    s = plan.tasklets[sender_id(e, node, i, remote)]
                    q = add_queue(e, node, producer.id, s.id, node, i)
                    out.append(q.id)
                    s.inbound.setdefault(0, []).append(q.id)
            for remote in remote_nodes:
                r = plan.tasklets[receiver_id(e, node, remote)]
                for i in range(src_par):
                    for j in range(dst_par):
                        consumer = plan.tasklets[instance_id(e.dest, node, j)]
                        q = add_queue(e, node, r.id, consumer.id, remote, i)
                        r.outbound.setdefault(i, []).append(q.id)
                        consumer.inbound.setdefault(e.dest_ordinal, []).append(q.id)
    return plan


class Destination(NamedTuple):
    node: int
    consumer: Optional[int]  # local consumer index; None when the item leaves the node


def route_item(
    item: Event,
    edge: EdgeSpec,
    consumer_count: int,
    partition_table=None,
    local_node: int = 0,
    rr_counter: int = 0,
):
    """Where an item goes on ``edge``; returns a list of destinations.

    Unicast picks ``rr_counter % consumer_count``; callers advance the counter.
    """
    if edge.routing == BROADCAST:
        return [Destination(local_node, i) for i in range(consumer_count)]
    if edge.routing == PARTITIONED:
        key = edge.key_fn(item.payload)
        if key is None:
            raise MissingKey(f"edge {edge.name}: record {item.payload!r} has no key")
        if edge.scope == DISTRIBUTED and partition_table is not None:
            pid = compute_partition_id(key, partition_table.partition_count)
            owner = partition_table.owner(pid)
            if owner != local_node:
                return [Destination(owner, None)]
            return [Destination(local_node, pid % consumer_count)]
        count = partition_table.partition_count if partition_table is not None else 271
        pid = compute_partition_id(key, count)
        return [Destination(local_node, pid % consumer_count)]
    return [Destination(local_node, rr_counter % consumer_count)]
