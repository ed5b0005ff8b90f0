import math
import warnings
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailstream.items import Event
from tailstream.nexmark.generator import (
    EventFactory, NexmarkSourceP, generate, read_trace, write_trace,
)
from tailstream.nexmark.histogram import (
    InsufficientSamples, LatencyHistogram, bucket_bounds, bucket_index, bucket_width,
)
from tailstream.nexmark.measure import BenchConfig, LatencyRecorder, LatencySinkP, make_results, run_benchmark
from tailstream.nexmark.model import PROFILES, Auction, Bid, GeneratorConfig, Person
from tailstream.nexmark.oracle import q1, q2, q5, q8, q13, run_oracle
from tailstream.nexmark.queries import QUERIES, QueryParams, convert_price, run_query, side_table
from tailstream.processor import Outbox, ProcessorContext
from tailstream.windows import WindowResult, max_with_ties

# ------------------------------------------------------------ generator


def test_fixed_seed_gives_identical_traces(tmp_path):
    cfg = GeneratorConfig(events_per_second=500, duration_s=2, seed=9)
    assert generate(cfg) == generate(cfg)
    write_trace(tmp_path / "a.bin", cfg)
    write_trace(tmp_path / "b.bin", cfg)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    config, events = read_trace(tmp_path / "a.bin")
    assert config == cfg and events == generate(cfg)
    assert generate(cfg.with_(seed=10)) != generate(cfg)


def test_rate_times_duration_events():
    events = generate(GeneratorConfig(events_per_second=100, duration_s=10))
    assert len(events) == 1000
    times = [e.event_time for e in events]
    assert times == sorted(times) and times[-1] < 10_000


def test_proportions_and_unique_auction_ids():
    events = generate(GeneratorConfig(events_per_second=1000, duration_s=5))
    kinds = [type(e) for e in events]
    assert (kinds.count(Person), kinds.count(Auction), kinds.count(Bid)) == (100, 300, 4600)
    ids = [e.id for e in events if type(e) is Auction]
    assert len(ids) == len(set(ids))


def test_suffix_from_any_offset_matches():
    cfg = GeneratorConfig(events_per_second=1000, duration_s=1)
    assert generate(cfg, start=400) == generate(cfg)[400:]


def test_keys_are_uniform_chi_square():
    # 10^6 draws over 10^4 keys: the statistic has mean 9999 and sd sqrt(2 * 9999) ~ 141
    cfg = GeneratorConfig(distinct_keys=10_000, events_per_second=100_000, duration_s=10)
    make = EventFactory(cfg)
    keys = np.fromiter((_key(make(i)) for i in range(1_000_000)), dtype=np.int64, count=1_000_000)
    counts = np.bincount(keys, minlength=10_000)
    expected = 100.0
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert abs(chi2 - 9999) < 5 * math.sqrt(2 * 9999)


def _key(e):
    if type(e) is Person:
        return e.id
    if type(e) is Auction:
        return e.seller
    return e.auction


def test_source_releases_nothing_before_its_time():
    now = [0.0]
    cfg = GeneratorConfig(events_per_second=1000, duration_s=1, source_delay_ms=20)
    src = NexmarkSourceP(cfg, start_wall=0.0, cooperative=True, clock=lambda: now[0])
    src.init(Outbox(1), ProcessorContext("src", owned_partitions=tuple(range(271))))
    for step in range(1, 120):
        now[0] = step / 100.0
        src.complete()
        released_at = now[0] * 1000 - cfg.source_delay_ms
        events = [x for x in src.outbox.buckets[0] if isinstance(x, Event)]
        assert all(e.event_time <= released_at for e in events)
        src.outbox.buckets[0].clear()
    assert src.released == 1000


def test_profiles():
    assert PROFILES["desk"].events_per_second == 100_000
    assert PROFILES["reference"].events_per_second == 1_000_000
    assert PROFILES["reference"].warmup_s == 20


# ------------------------------------------------------------ queries


def bid(auction, price=100, t=0, bidder=1):
    return Bid(auction, bidder, price, t)


def test_q1_examples():
    assert convert_price(100, 0.5) == 50
    assert convert_price(77, 1) == 77
    assert q1([bid(1, 100)], QueryParams(q1_rate=0.5)) == {bid(1, 50): 1}


@given(st.lists(st.integers(1, 10**6), max_size=50), st.floats(0.01, 10))
def test_q1_equals_scalar_conversion(prices, rate):
    got = q1([bid(1, p) for p in prices], QueryParams(q1_rate=rate))
    assert sorted(b.price for b in got.elements()) == sorted(math.floor(p * rate + 0.5) for p in prices)


def test_q2_examples():
    assert q2([bid(123), bid(1), bid(246)]) == {bid(123): 1, bid(246): 1}


def test_q5_tie_rule():
    agg = max_with_ties()

    def top(counts):
        acc = agg.create()
        for pair in counts.items():
            acc = agg.accumulate(acc, pair)
        return agg.finish(acc)

    assert top({"A": 3, "B": 5}) == (("B", 5),)
    assert top({"A": 4, "B": 4}) == (("A", 4), ("B", 4))


def test_q5_oracle_on_a_tiny_stream():
    params = QueryParams(window_ms=20, slide_ms=10)
    events = [bid(1, t=1), bid(2, t=5), bid(2, t=12), bid(1, t=25)]
    assert q5(events, params) == {
        (10, None, ((1, 1), (2, 1))): 1,
        (20, None, ((2, 2),)): 1,
        (30, None, ((1, 1), (2, 1))): 1,
        (40, None, ((1, 1),)): 1,
    }


def test_q8_same_window_joins_next_window_does_not():
    params = QueryParams(q8_window_ms=100)
    events = [Person(7, "p7", "CA", 10), Auction(50, 7, 1, 999, 40), Auction(51, 7, 1, 999, 120),
              Person(8, "p8", "WA", 130)]
    assert q8(events, params) == {(100, 7, (50,)): 1}
    assert run_query("q8", events, params) == q8(events, params)


def test_q13_probe_examples():
    side = [(1, "a")]
    hit, miss = Auction(1, 1, 1, 0, 0), Auction(2, 1, 2, 0, 0)
    assert q13([hit, miss], side) == {(hit, (1, "a")): 1}
    assert run_query("q13", [hit, miss], side=side) == q13([hit, miss], side)


def test_q13_default_side_table_has_misses():
    cats = {c for c, _ in side_table()}
    assert 4 not in cats and 0 in cats


def nested_loop_q8(events, size):
    out = {}
    for p in events:
        if type(p) is not Person:
            continue
        for a in events:
            if type(a) is Auction and a.seller == p.id and a.event_time // size == p.event_time // size:
                end = (p.event_time // size + 1) * size
                out.setdefault((end, p.id), set()).add(a.id)
    return {(end, pid, tuple(sorted(ids))): 1 for (end, pid), ids in out.items()}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_q8_oracle_equals_windowed_nested_loop(seed):
    cfg = GeneratorConfig(distinct_keys=20, events_per_second=200, duration_s=3, seed=seed)
    events = generate(cfg)
    params = QueryParams(q8_window_ms=500)
    assert dict(q8(events, params)) == nested_loop_q8(events, 500)


def brute_q5(events, params):
    bids = [e for e in events if type(e) is Bid]
    out = {}
    size, slide = params.window_ms, params.slide_ms
    last = max(e.event_time for e in bids)
    for end in range(slide, last + size + slide, slide):
        counts = {}
        for b in bids:
            if end - size <= b.event_time < end:
                counts[b.auction] = counts.get(b.auction, 0) + 1
        if counts:
            best = max(counts.values())
            out[(end, None, tuple(sorted((k, best) for k, v in counts.items() if v == best)))] = 1
    return out


def test_q5_vectorized_oracle_equals_brute_force():
    cfg = GeneratorConfig(distinct_keys=30, events_per_second=300, duration_s=3, seed=5)
    events = generate(cfg)
    params = QueryParams(window_ms=500, slide_ms=50)
    assert dict(q5(events, params, cfg.distinct_keys)) == brute_q5(events, params)


@pytest.mark.parametrize("query", QUERIES)
def test_engine_equals_oracle(query):
    cfg = GeneratorConfig(distinct_keys=200, events_per_second=2000, duration_s=4, seed=17)
    events = generate(cfg)
    params = QueryParams(window_ms=1000, slide_ms=100, q8_window_ms=1000)
    assert run_query(query, events, params) == run_oracle(query, events, params, cfg.distinct_keys)


# ------------------------------------------------------------ histogram


def test_bucket_bounds_cover_every_value():
    prev_high = -1
    for i in range(bucket_index(10**7) + 1):
        low, high = bucket_bounds(i)
        assert low == prev_high + 1 and bucket_index(low) == i == bucket_index(high)
        prev_high = high


def test_constant_latency():
    h = LatencyHistogram()
    h.record_all([5000] * 2000)
    for v in h.percentiles().values():
        assert abs(v - 5000) <= bucket_width(5000)


def test_two_point_mixture_p999_is_the_high_point():
    # 1 % of the samples at 100 ms: every rank above 99 % lands there
    h = LatencyHistogram()
    h.record_all([1000] * 9900 + [100_000] * 100)
    assert abs(h.percentile(99.9) - 100_000) <= bucket_width(100_000)
    assert abs(h.percentile(99) - 1000) <= bucket_width(1000)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=300),
       st.floats(0.01, 100, exclude_min=False))
def test_percentile_within_one_bucket_of_sorted_oracle(values, q):
    h = LatencyHistogram()
    h.record_all(values)
    exact = sorted(values)[max(1, math.ceil(q / 100 * len(values))) - 1]
    got = h.percentile(q)
    assert exact <= got < exact + bucket_width(exact)
    assert len(h) == len(values)


@given(st.lists(st.integers(0, 10**8), min_size=1, max_size=200))
def test_percentiles_nondecreasing_and_merge(values):
    h = LatencyHistogram()
    h.record_all(values)
    ps = [h.percentile(q) for q in (1, 50, 90, 99, 99.9, 99.99, 100)]
    assert ps == sorted(ps) and ps[-1] == max(values)
    a, b = LatencyHistogram(), LatencyHistogram()
    a.record_all(values[::2])
    b.record_all(values[1::2])
    merged = a.merge(b)
    assert merged.counts == h.counts and (merged.min, merged.max) == (h.min, h.max)
    assert LatencyHistogram.from_dict(h.to_dict()).counts == h.counts


def test_insufficient_samples_warns():
    h = LatencyHistogram()
    h.record_all([10] * 10)
    with pytest.warns(InsufficientSamples):
        make_results(BenchConfig(), h, 0.0, {}, 0)


# ------------------------------------------------------------ latency sink


def test_hundred_results_per_second_for_240s_gives_24000_samples():
    # 10 ms slide, 20 s warmup, then 240 s of measurement; a 10 s window keeps producing
    # results for 10 s after the last event, and those are not measured
    recorder = LatencyRecorder(start_wall=0.0, warmup_ms=20_000, until_ms=260_000)
    sink = LatencySinkP(recorder)
    sink.init(Outbox(1), ProcessorContext("sink"))
    results = deque(Event(WindowResult(end, None, (), end / 1000.0 + 0.002, end - 1), end - 1)
                    for end in range(10, 270_001, 10))
    sink.process(0, results)
    h = recorder.merged()
    assert len(h) == 24_000
    assert abs(h.percentile(50) - 3000) <= bucket_width(3000)


def test_benchmark_measures_only_windows_due_inside_the_run():
    gen = GeneratorConfig(events_per_second=1000, duration_s=3, warmup_s=1, distinct_keys=100,
                          watermark_granularity_ms=100)
    cfg = BenchConfig(query="q5", generator=gen, params=QueryParams(window_ms=1000, slide_ms=100), threads=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientSamples)
        res = run_benchmark(cfg)
    # windows due at 1.0 .. 2.9 s: ends 1100 .. 3000
    assert res["samples"] == 20
    assert res["min"] > 0


def test_per_event_latency_counts_from_predetermined_time():
    now = [10.5]
    recorder = LatencyRecorder(start_wall=10.0, warmup_ms=0)
    sink = LatencySinkP(recorder, clock=lambda: now[0])
    sink.init(Outbox(1), ProcessorContext("sink"))
    sink.process(0, deque([Event("x", 480)]))
    assert abs(recorder.merged().percentile(100) - 20_000) <= bucket_width(20_000)


def test_results_json_shape():
    h = LatencyHistogram()
    h.record_all(range(1000, 3000))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = make_results(BenchConfig(), h, 123.0, {"dropped_late": 2}, 4)
    assert set(res) >= {"config", "percentiles", "histogram", "throughput", "dropped_late", "snapshots_taken"}
    assert list(res["percentiles"]) == ["p50", "p90", "p99", "p99.9", "p99.99"]
