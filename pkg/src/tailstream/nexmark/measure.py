"""Latency measurement for NEXMark queries.

The clock of every event starts at its predetermined occurrence time
``start_wall + event_time``, whether or not the source managed to release it
on time. For window results it stops when the aggregating stage started
emitting the window; the window's own start time is the moment its last
possible event was due (one millisecond before the window end, plus the
allowed lag). For per-event queries it
stops when the sink receives the event. Samples due before the warmup are
discarded, and so are windows due after the last generated event: a finite
source closes those early when it ends, which an endless stream never does.
"""

from __future__ import annotations

import csv
import io
import json
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

from ..pipeline import Sinks, Sources
from ..processor import Processor
from ..runtime import run_job
from ..tasklets import EXACTLY_ONCE, GUARANTEES, NONE
from ..windows import WindowResult
from .generator import NexmarkSourceP
from .histogram import PERCENTILES, InsufficientSamples, LatencyHistogram
from .model import GeneratorConfig
from .queries import QueryParams, build_query

MIN_SAMPLES = 1000


class LatencyRecorder:
    """Collects the per-sink-instance histograms of one run."""

    def __init__(self, start_wall: float, warmup_ms: float, until_ms: float = float("inf")):
        self.start_wall = start_wall
        self.warmup_ms = warmup_ms
        # samples count only when due in [warmup_ms, until_ms)
        self.until_ms = until_ms
        self._lock = threading.Lock()
        self.histograms = []

    def new_histogram(self) -> LatencyHistogram:
        h = LatencyHistogram()
        with self._lock:
            self.histograms.append(h)
        return h

    def merged(self) -> LatencyHistogram:
        out = LatencyHistogram()
        with self._lock:
            for h in self.histograms:
                out.merge(h)
        return out


class LatencySinkP(Processor):
    """Records the latency of every item it receives.

    Without an explicit ``recorder`` the sink shares one per node, kept in
    the execution's services under ``"latency"``. The node reports it when
    the execution ends.
    """

    def __init__(self, recorder: Optional[LatencyRecorder] = None, clock=time.time,
                 start_wall: Optional[float] = None, warmup_ms: float = 0.0, until_ms: float = float("inf")):
        if recorder is None and start_wall is None:
            raise ValueError("need a recorder or a start_wall")
        self.recorder = recorder
        self.start_wall = start_wall
        self.warmup_ms = warmup_ms
        self.until_ms = until_ms
        self.clock = clock
        self.items = 0

    def init(self, outbox, context):
        super().init(outbox, context)
        if self.recorder is None:
            self.recorder = context.services.setdefault(
                "latency", LatencyRecorder(self.start_wall, self.warmup_ms, self.until_ms)
            )
        self.hist = self.recorder.new_histogram()

    def process(self, ordinal, inbox):
        rec, hist = self.recorder, self.hist
        start, warmup, until = rec.start_wall, rec.warmup_ms, rec.until_ms
        now = None
        for ev in inbox:
            p = ev.payload
            if type(p) is WindowResult:
                due = p.trigger_time if p.trigger_time is not None else p.end - 1
                if warmup <= due < until and p.emitted_at is not None:
                    hist.record((p.emitted_at - start - due / 1000.0) * 1e6)
            else:
                t = ev.event_time
                if warmup <= t < until:
                    if now is None:
                        now = self.clock()
                    hist.record((now - start - t / 1000.0) * 1e6)
        self.items += len(inbox)
        inbox.clear()


@dataclass
class BenchConfig:
    query: str = "q5"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    params: QueryParams = field(default_factory=QueryParams)
    guarantee: str = NONE
    # 0 disables snapshots
    snapshot_interval_ms: int = 0
    threads: int = 2
    cooperative_source: bool = False
    source_parallelism: int = 1

    def __post_init__(self):
        if self.guarantee not in GUARANTEES:
            raise ValueError(f"guarantee must be one of {GUARANTEES}")

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "generator": self.generator.to_dict(),
            "params": self.params.to_dict(),
            "guarantee": self.guarantee,
            "snapshot_interval_ms": self.snapshot_interval_ms,
            "threads": self.threads,
            "cooperative_source": self.cooperative_source,
            "source_parallelism": self.source_parallelism,
        }


class _SourceFactory:
    def __init__(self, config, start_wall, cooperative):
        self.config = config
        self.start_wall = start_wall
        self.cooperative = cooperative

    def __call__(self):
        return NexmarkSourceP(self.config, self.start_wall, cooperative=self.cooperative)


def bench_dag(cfg: BenchConfig, start_wall: float, recorder: LatencyRecorder):
    source = Sources.custom(
        _SourceFactory(cfg.generator, start_wall, cfg.cooperative_source), "stream",
        name="nexmark", blocking=not cfg.cooperative_source, local_parallelism=cfg.source_parallelism,
    )
    sink = Sinks.custom(lambda: LatencySinkP(recorder), name="latency-sink")
    return build_query(cfg.query, source, sink, cfg.params).compile()


def start_benchmark(cfg: BenchConfig, service=None, start_delay_s: float = 0.2, job_id: int = 1,
                    measure_until_s: Optional[float] = None):
    """Launch one benchmark job without waiting; returns ``(finish, recorder)``.

    ``finish()`` waits for the job and returns the results dictionary.
    Samples due at or after ``measure_until_s`` (default: the generator
    duration) are not recorded; jobs sharing a service can stop measuring
    before any of them starts its end-of-stream work.
    """
    start_wall = time.time() + start_delay_s
    gen = cfg.generator
    until_s = gen.duration_s if measure_until_s is None else min(measure_until_s, gen.duration_s)
    recorder = LatencyRecorder(start_wall, gen.warmup_s * 1000.0, until_s * 1000.0)
    dag = bench_dag(cfg, start_wall, recorder)
    interval = cfg.snapshot_interval_ms / 1000.0 if cfg.snapshot_interval_ms else None
    guarantee = cfg.guarantee if interval else NONE
    timeout = cfg.generator.duration_s + 120.0
    execution, finish_job = run_job(
        dag, threads=cfg.threads, guarantee=guarantee, snapshot_interval_s=interval,
        timeout=timeout, service=service, job_id=job_id, wait=False,
    )

    def finish():
        result = finish_job()
        elapsed = max(time.time() - start_wall, 1e-9)
        released = sum(
            getattr(pt.processor, "released", 0) for pt in execution.processor_tasklets
        )
        return make_results(cfg, recorder.merged(), released / elapsed, result.metrics,
                            result.snapshots_taken)

    return finish, recorder


def run_benchmark(cfg: BenchConfig) -> dict:
    finish, _ = start_benchmark(cfg)
    return finish()


def make_results(cfg: BenchConfig, hist: LatencyHistogram, throughput: float, metrics: dict,
                 snapshots_taken: int) -> dict:
    if hist.total < MIN_SAMPLES:
        warnings.warn(f"only {hist.total} latency samples (< {MIN_SAMPLES})", InsufficientSamples)
    percentiles = {k: v / 1000.0 for k, v in hist.percentiles().items()} if hist.total else {}
    return {
        "config": cfg.to_dict(),
        "percentiles": percentiles,
        "latency_unit": "ms",
        "min": hist.min / 1000.0 if hist.total else None,
        "max": hist.max / 1000.0 if hist.total else None,
        "samples": hist.total,
        "histogram": hist.to_dict(),
        "throughput": throughput,
        "dropped_late": metrics.get("dropped_late", 0),
        "fell_behind": metrics.get("fell_behind", 0),
        "snapshots_taken": snapshots_taken,
    }


def format_table(results: dict) -> str:
    lines = [f"query {results['config']['query']}  samples {results['samples']}  "
             f"throughput {results['throughput']:.0f} events/s  snapshots {results['snapshots_taken']}"]
    for label, v in results["percentiles"].items():
        lines.append(f"  {label:>7}  {v:10.3f} ms")
    if results["min"] is not None:
        lines.append(f"  {'min':>7}  {results['min']:10.3f} ms")
        lines.append(f"  {'max':>7}  {results['max']:10.3f} ms")
    lines.append(f"  dropped late {results['dropped_late']}, fell behind {results['fell_behind']}")
    return "\n".join(lines)


def to_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "value_ms"])
    for label, v in results["percentiles"].items():
        w.writerow([label, v])
    w.writerow(["min", results["min"]])
    w.writerow(["max", results["max"]])
    w.writerow([])
    w.writerow(["bucket_low_us", "bucket_high_us", "count"])
    for row in results["histogram"]["buckets"]:
        w.writerow(row)
    return buf.getvalue()


def write_results(results: dict, path):
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
    csv_path = str(path).rsplit(".", 1)[0] + ".csv"
    with open(csv_path, "w") as f:
        f.write(to_csv(results))
    return csv_path


__all__ = [
    "BenchConfig", "EXACTLY_ONCE", "LatencyRecorder", "LatencySinkP", "PERCENTILES", "format_table",
    "make_results", "run_benchmark", "start_benchmark", "to_csv", "write_results",
]
