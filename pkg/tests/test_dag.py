import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailstream.dag import (
    BROADCAST, CycleDetected, DagSpec, DanglingEdge, DuplicateOrdinal, EdgeSpec, TooManyBlockingVertices,
    VertexSpec, edge, validate_dag,
)
from tailstream.grid.partition import build_partition_table
from tailstream.hashing import compute_partition_id, key_hash64, serialize_key
from tailstream.items import Event
from tailstream.planner import Destination, RECEIVER, SENDER, plan_execution, route_item
from tailstream.processor import NoopP


def chain(*names, parallelism=None):
    dag = DagSpec()
    for n in names:
        dag.new_vertex(n, NoopP, parallelism)
    for a, b in zip(names, names[1:]):
        dag.add_edge(edge(a, b))
    return dag


# ------------------------------------------------------------ validate_dag


def test_empty_dag_is_valid():
    assert validate_dag(DagSpec()) == []


def test_chain_is_valid():
    assert validate_dag(chain("A", "B", "C")) == []


def test_two_cycle_detected():
    dag = chain("A", "B")
    dag.add_edge(edge("B", "A"))
    errors = validate_dag(dag)
    cycles = [e for e in errors if isinstance(e, CycleDetected)]
    assert len(cycles) == 1
    assert set(cycles[0].vertices) == {"A", "B"}


def test_dangling_edge_detected():
    dag = chain("A")
    dag.add_edge(edge("A", "ghost"))
    assert any(isinstance(e, DanglingEdge) for e in validate_dag(dag))


def test_duplicate_inbound_ordinal_detected():
    dag = chain("A", "B", "C")
    dag.add_edge(edge("A", "C"))
    assert any(isinstance(e, DuplicateOrdinal) for e in validate_dag(dag))


def test_three_blocking_sources_rejected():
    dag = DagSpec()
    for i in range(3):
        dag.new_vertex(f"src{i}", NoopP, 1, cooperative=False)
    dag.new_vertex("sink", NoopP)
    for i in range(3):
        dag.add_edge(edge(f"src{i}", "sink", dest_ordinal=i))
    assert any(isinstance(e, TooManyBlockingVertices) for e in validate_dag(dag))


def test_edge_invariants():
    with pytest.raises(ValueError):
        EdgeSpec("a", "b", routing="partitioned")
    with pytest.raises(ValueError):
        EdgeSpec("a", "b", queue_capacity=1000)
    with pytest.raises(ValueError):
        VertexSpec("v", NoopP, local_parallelism=0)


def test_dag_json_dump_lists_vertices_and_edges():
    d = chain("A", "B").to_json_dict()
    assert [v["name"] for v in d["vertices"]] == ["A", "B"]
    assert d["edges"][0]["from"] == "A" and d["edges"][0]["to"] == "B"


# ------------------------------------------------------------ plan_execution


def test_single_core_chain_plan():
    plan = plan_execution(chain("A", "B", parallelism=1), [0], 1)
    assert len(plan.tasklets) == 2
    assert len(plan.queues) == 1
    workers, dedicated = plan.workers(0)
    assert len(workers) == 1 and len(workers[0]) == 2 and dedicated == []


def test_local_partitioned_edge_has_queue_per_instance_pair():
    dag = DagSpec()
    dag.new_vertex("A", NoopP, 2)
    dag.new_vertex("B", NoopP, 2)
    dag.add_edge(edge("A", "B").partitioned(lambda x: x))
    plan = plan_execution(dag, [0], 2)
    pairs = {(q.producer, q.consumer) for q in plan.queues.values()}
    assert pairs == {(f"A@0#{i}", f"B@0#{j}") for i in range(2) for j in range(2)}


def test_distributed_edge_gets_exchange_tasklets():
    dag = DagSpec()
    dag.new_vertex("A", NoopP, 2)
    dag.new_vertex("B", NoopP, 2)
    dag.add_edge(edge("A", "B").partitioned(lambda x: x).distributed())
    plan = plan_execution(dag, [1, 2], 2)
    for node in (1, 2):
        assert len(plan.receivers(node)) == 1
        assert len(plan.senders(node)) == 2  # one per producer instance
        assert all(t.kind in (SENDER, RECEIVER) for t in plan.senders(node) + plan.receivers(node))


def test_default_parallelism_is_one_instance_per_core():
    plan = plan_execution(chain("A", "B"), [0], 3)
    assert plan.parallelism == {"A": 3, "B": 3}
    workers, _ = plan.workers(0)
    for w in workers:
        # a full copy of the DAG on every core
        assert sorted(t.split("@")[0] for t in w) == ["A", "B"]


@st.composite
def random_dags(draw):
    n = draw(st.integers(1, 6))
    dag = DagSpec()
    for i in range(n):
        dag.new_vertex(f"v{i}", NoopP, draw(st.integers(1, 3)))
    used_in = {}
    for j in range(1, n):
        for i in range(j):
            if draw(st.booleans()):
                ordinal = used_in.get(j, 0)
                used_in[j] = ordinal + 1
                e = edge(f"v{i}", f"v{j}", dest_ordinal=ordinal)
                kind = draw(st.sampled_from(["unicast", "partitioned", "broadcast"]))
                if kind == "partitioned":
                    e = e.partitioned(lambda x: x)
                elif kind == "broadcast":
                    e = e.broadcast()
                if draw(st.booleans()):
                    e = e.distributed()
                dag.add_edge(e)
    return dag


@settings(max_examples=60, deadline=None)
@given(random_dags(), st.integers(1, 3), st.integers(1, 3))
def test_plan_completeness(dag, nodes, cores):
    """Every (instance, input edge, upstream channel) has one queue; every queue has both ends."""
    members = list(range(1, nodes + 1))
    plan = plan_execution(dag, members, cores)
    for q in plan.queues.values():
        assert q.producer in plan.tasklets and q.consumer in plan.tasklets
    for t in plan.tasklets.values():
        if t.kind != "processor":
            continue
        for e in dag.inbound(t.vertex):
            queues = [q for q in plan.queues.values() if q.consumer == t.id and q.edge == e]
            remote = nodes - 1 if e.scope == "distributed" else 0
            expected = plan.parallelism[e.source] * (1 + remote)
            assert len(queues) == expected
            assert len({(q.origin_node, q.origin_index) for q in queues}) == expected


# ------------------------------------------------------------ route_item


def test_broadcast_reaches_every_consumer():
    e = edge("a", "b").broadcast()
    assert e.routing == BROADCAST
    assert route_item(Event("x"), e, 3) == [Destination(0, 0), Destination(0, 1), Destination(0, 2)]


def test_partitioned_single_consumer_always_zero():
    e = edge("a", "b").partitioned(lambda x: x)
    for key in ["a", 7, (1, 2), "zz"]:
        assert route_item(Event(key), e, 1) == [Destination(0, 0)]


def test_abc_partition_matches_independent_hash():
    # oracle: blake2b-64 (little endian) over the canonical encoding b"s" + utf-8
    digest = hashlib.blake2b(b"sabc", digest_size=8).digest()
    expected = int.from_bytes(digest, "little") % 271
    assert expected == 190
    assert compute_partition_id("abc") == 190

    table = build_partition_table((1, 2), 271, 1)
    e = edge("a", "b").partitioned(lambda x: x).distributed()
    first = route_item(Event("abc"), e, 2, table, local_node=1)
    assert first == route_item(Event("abc"), e, 2, table, local_node=1)
    # 190 is even: round-robin owners put it on the first member
    assert table.owner(190) == 1
    assert first == [Destination(1, 190 % 2)]
    assert route_item(Event("abc"), e, 2, table, local_node=2) == [Destination(1, None)]


def test_numeric_keys_that_compare_equal_share_a_partition():
    assert serialize_key(3) == serialize_key(3.0) == serialize_key(True + 2)
    assert key_hash64(42) == int.from_bytes(hashlib.blake2b(b"i42", digest_size=8).digest(), "little")


@given(st.one_of(st.integers(), st.text(), st.tuples(st.integers(), st.text())), st.integers(1, 1000))
def test_partition_is_pure_function_of_key(key, count):
    a = compute_partition_id(key, count)
    assert a == compute_partition_id(key, count)
    assert 0 <= a < count


def test_unicast_round_robin():
    e = edge("a", "b")
    dests = [route_item(Event(i), e, 3, rr_counter=i)[0].consumer for i in range(6)]
    assert dests == [0, 1, 2, 0, 1, 2]

