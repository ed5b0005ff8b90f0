import random
from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipelines import build_pipeline, random_recipe
from tailstream.dag import BROADCAST, DISTRIBUTED, PARTITIONED, validate_dag
from tailstream.pipeline import (
    STATELESS, BoundednessMismatch, HashJoinProbeP, MissingKey, Pipeline, PipelineError, Sinks, Sources, comparable,
    interpret, whole_item,
)
from tailstream.items import Event
from tailstream.processor import Outbox, ProcessorContext
from tailstream.runtime import run_job
from tailstream.scheduler import EngineConfig, ExecutionService
from tailstream.windows import counting, sliding, summing


@pytest.fixture(scope="module")
def service():
    s = ExecutionService(EngineConfig(cooperative_thread_count=2)).start()
    yield s
    s.shutdown()


def run_sinks(recipe, service, fuse):
    p, sinks = build_pipeline(recipe)
    run_job(p.compile(fuse=fuse, local_parallelism=2), service=service, timeout=60)
    return [comparable(s) for s in sinks]


def interpreted(recipe):
    p, sinks = build_pipeline(recipe)
    result = interpret(p)
    return [comparable(result[s.name]) for s in p.stages if s.kind == "sink"]


# ------------------------------------------------------------ building


def test_batch_aggregate_is_valid(service):
    out = []
    p = Pipeline()
    p.read_from(Sources.batch(range(10))).aggregate(counting()).write_to(Sinks.list(out))
    p.validate()
    run_job(p.compile(), service=service)
    assert out == [10]


def test_stream_aggregate_without_window_is_rejected():
    p = Pipeline()
    s = p.read_from(Sources.stream([(1, 0)]))
    with pytest.raises(BoundednessMismatch):
        s.aggregate(counting())
    with pytest.raises(BoundednessMismatch):
        s.grouping_key(whole_item).aggregate(counting())


def test_windowing_a_batch_stage_is_rejected():
    p = Pipeline()
    with pytest.raises(BoundednessMismatch):
        p.read_from(Sources.batch([1])).window(sliding(10, 10)).aggregate(counting())


def test_missing_key_and_non_callable():
    p = Pipeline()
    s = p.read_from(Sources.batch([1]))
    with pytest.raises(MissingKey):
        s.grouping_key(None)
    with pytest.raises(MissingKey):
        s.hash_join(p.read_from(Sources.batch([])), None, whole_item)
    with pytest.raises(TypeError):
        s.map(42)
    with pytest.raises(TypeError):
        s.map(lambda a, b: a)


def test_stream_build_side_is_rejected():
    p = Pipeline()
    probe = p.read_from(Sources.batch([1]))
    with pytest.raises(BoundednessMismatch):
        probe.hash_join(p.read_from(Sources.stream([(1, 0)])), whole_item, whole_item)


def test_pipeline_without_sink_and_writing_past_a_sink():
    p = Pipeline()
    sink = p.read_from(Sources.batch([1])).map(whole_item)
    with pytest.raises(PipelineError):
        p.validate()
    done = sink.write_to(Sinks.list([]))
    with pytest.raises(PipelineError):
        done.map(whole_item)


def hybrid(persons, orders):
    """Batch persons counted by age; a stream of orders joined against the counts."""
    out = []
    p = Pipeline()
    by_age = p.read_from(Sources.batch(persons, name="persons")).grouping_key(lambda x: x["age"]) \
        .aggregate(counting())
    (p.read_from(Sources.stream(orders, name="orders"))
     .hash_join(by_age, lambda o: o["age"], lambda row: row[0])
     .map(lambda pair: (pair[0]["id"], pair[1][1]))
     .write_to(Sinks.list(out)))
    return p, out


def test_hybrid_batch_and_stream_join(service):
    persons = [{"age": a} for a in (30, 30, 41, 52, 30)]
    orders = [({"id": i, "age": a}, i * 10) for i, a in enumerate((30, 41, 99, 52, 30))]
    p, out = hybrid(persons, orders)
    p.validate()
    run_job(p.compile(), service=service)
    assert sorted(out) == [(0, 3), (1, 1), (3, 1), (4, 3)]


# ------------------------------------------------------------ compiling


def word_count(lines, out):
    p = Pipeline()
    (p.read_from(Sources.batch(lines))
     .flat_map(str.split)
     .filter(bool)
     .grouping_key(whole_item)
     .aggregate(counting())
     .write_to(Sinks.list(out)))
    return p


def test_word_count_compiles_to_five_vertices(service):
    out = []
    p = word_count(["a b a", "c  b a", ""], out)
    dag = p.compile()
    assert len(dag.vertices) == 5
    assert validate_dag(dag) == []
    names = [v.name for v in dag.vertices]
    assert names[1] == "flat_map-1+filter-2"
    # accumulate feeds combine over a partitioned, distributed edge
    inner = [e for e in dag.edges if e.source == names[2]]
    assert inner[0].routing == PARTITIONED and inner[0].scope == DISTRIBUTED
    run_job(dag, service=service)
    assert sorted(out) == [("a", 3), ("b", 2), ("c", 1)]


def test_map_only_pipeline_compiles_to_three_vertices():
    p = Pipeline()
    p.read_from(Sources.batch([1])).map(whole_item).map(whole_item).write_to(Sinks.list([]))
    assert len(p.compile().vertices) == 3
    assert len(p.compile(fuse=False).vertices) == 4


def test_hash_join_compiles_to_broadcast_build_and_probe():
    p, _ = hybrid([], [])
    dag = p.compile()
    bcast = [e for e in dag.edges if e.routing == BROADCAST]
    assert len(bcast) == 1
    assert bcast[0].source.endswith("-build") and bcast[0].dest.endswith("-probe")
    assert bcast[0].dest_ordinal == 1 and bcast[0].scope == DISTRIBUTED


def test_fusion_never_crosses_keyed_windowed_or_fanout_stages():
    for seed in range(200):
        p, _ = build_pipeline(random_recipe(random.Random(seed)))
        for group in p.fusion_plan():
            kinds = {p.stages[i].kind for i in group}
            if len(group) > 1:
                assert kinds <= set(STATELESS)
                for i in group[:-1]:
                    assert len(p.downstream(i)) == 1


# ------------------------------------------------------------ semantic preservation


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_fused_equals_unfused_equals_interpreted(service, seed):
    recipe = random_recipe(random.Random(seed))
    fused = run_sinks(recipe, service, fuse=True)
    assert fused == run_sinks(recipe, service, fuse=False)
    assert fused == interpreted(recipe)


def test_windowed_stream_aggregate_matches_interpretation(service):
    rng = random.Random(11)
    items = sorted(((rng.randrange(5), rng.randrange(3000)) for _ in range(2000)), key=lambda e: e[1])
    out = []
    p = Pipeline()
    (p.read_from(Sources.stream(items, allowed_lag=0, partitions=3))
     .grouping_key(whole_item)
     .window(sliding(500, 100))
     .aggregate(summing(lambda x: x + 1))
     .write_to(Sinks.list(out)))
    expected = interpret(p)
    run_job(p.compile(local_parallelism=2), service=service)
    assert comparable(out) == comparable(next(iter(expected.values())))


# ------------------------------------------------------------ hash join


def probe(table, items, key_fn=whole_item):
    p = HashJoinProbeP(key_fn)
    p.init(Outbox(1), ProcessorContext("probe"))
    p.process(1, deque([Event(table, 0)]))
    p.process(0, deque(Event(x, 0) for x in items))
    return [e.payload for e in p.outbox.buckets[0]]


def test_probe_examples():
    assert probe({1: ["a"]}, [1]) == [(1, "a")]
    assert probe({1: ["a"]}, [2]) == []


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers()), max_size=30),
       st.lists(st.integers(0, 12), max_size=30))
def test_probe_equals_nested_loop_join(build, items):
    table = {}
    for row in build:
        table.setdefault(row[0], []).append(row)
    expected = [(x, b) for x in items for b in build if b[0] == x]
    assert sorted(probe(table, items)) == sorted(expected)


def test_build_completes_before_any_probe(service):
    # a large build side and a small probe stream: an early probe would miss matches
    build = [(i % 50, i) for i in range(20_000)]
    items = [(k, k) for k in range(60)]
    out = []
    p = Pipeline()
    b = p.read_from(Sources.batch(build, batch_size=64))
    (p.read_from(Sources.stream(items, partitions=1, batch_size=1))
     .hash_join(b, whole_item, lambda row: row[0])
     .write_to(Sinks.list(out)))
    run_job(p.compile(local_parallelism=2), service=service, timeout=60)
    assert len(out) == 50 * 400
    assert comparable(out) == comparable(interpret(p)[p.stages[-1].name])
