"""Command line: benchmarks, oracles, cluster nodes and job submission."""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading
import time

import click

from .cluster.jobs import InvalidJobConfig, JobConfig, parse_guarantee
from .nexmark.model import PROFILES
from .nexmark.queries import QUERIES, QueryParams


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeat for debug).")
def main(verbose):
    """tailstream: a low-latency distributed stream processing engine."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ------------------------------------------------------------------ bench


@main.group()
def bench():
    """NEXMark benchmark harness."""


def _query_params(window, slide):
    return QueryParams(window_ms=window, slide_ms=slide, q8_window_ms=window)


@bench.command("run")
@click.option("--query", type=click.Choice(QUERIES), default="q5", show_default=True)
@click.option("--nodes", type=int, default=1, show_default=True,
              help="Members; more than one starts local worker processes.")
@click.option("--rate", type=int, default=None, help="Events per second (default from the profile).")
@click.option("--window", type=int, default=10_000, show_default=True, help="Window size in ms.")
@click.option("--slide", type=int, default=10, show_default=True, help="Sliding step in ms.")
@click.option("--guarantee", default="none", show_default=True,
              help="none, at-least-once or exactly-once.")
@click.option("--snapshot-interval", type=int, default=0, show_default=True,
              help="Snapshot interval in ms; 0 disables snapshots.")
@click.option("--duration", type=float, default=None, help="Seconds of generated events.")
@click.option("--warmup", type=float, default=None, help="Seconds before latency is recorded.")
@click.option("--keys", type=int, default=None, help="Distinct person and auction keys.")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--threads", type=int, default=2, show_default=True, help="Cooperative threads per node.")
@click.option("--source-delay", type=int, default=0, show_default=True,
              help="Release every event this many ms after its occurrence time.")
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="desk", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Results JSON (a CSV is written next to it).")
@click.option("--dag-dump", is_flag=True, help="Print the job DAG as JSON and exit.")
def bench_run(query, nodes, rate, window, slide, guarantee, snapshot_interval, duration, warmup, keys, seed,
              threads, source_delay, profile, out, dag_dump):
    """Run a paced NEXMark query and report its latency distribution."""
    from .nexmark.measure import BenchConfig, bench_dag, format_table, run_benchmark, write_results

    base = PROFILES[profile]
    overrides = {"seed": seed, "source_delay_ms": source_delay, "watermark_granularity_ms": max(1, slide)}
    for name, value in (("events_per_second", rate), ("duration_s", duration), ("warmup_s", warmup),
                        ("distinct_keys", keys)):
        if value is not None:
            overrides[name] = value
    try:
        cfg = BenchConfig(query=query, generator=base.with_(**overrides), params=_query_params(window, slide),
                          guarantee=parse_guarantee(guarantee), snapshot_interval_ms=snapshot_interval,
                          threads=threads)
    except (ValueError, InvalidJobConfig) as e:
        raise click.BadParameter(str(e))
    if dag_dump:
        click.echo(bench_dag(cfg, 0.0, None).to_json())
        return
    if nodes < 1:
        raise click.BadParameter("--nodes must be at least 1")
    if nodes == 1:
        results = run_benchmark(cfg)
    else:
        from .cluster.local import run_cluster_benchmark

        results = run_cluster_benchmark(cfg, nodes)
    click.echo(format_table(results))
    if out:
        csv_path = write_results(results, out)
        click.echo(f"wrote {out} and {csv_path}")


@bench.command("record")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--rate", type=int, default=10_000, show_default=True)
@click.option("--duration", type=float, default=60.0, show_default=True)
@click.option("--keys", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
def bench_record(out, rate, duration, keys, seed):
    """Record a deterministic event trace for later replay."""
    from .nexmark.generator import write_trace
    from .nexmark.model import GeneratorConfig

    cfg = GeneratorConfig(events_per_second=rate, duration_s=duration, distinct_keys=keys, seed=seed)
    write_trace(out, cfg)
    click.echo(f"wrote {cfg.total_events} events to {out}")


@bench.command("oracle")
@click.option("--query", type=click.Choice(QUERIES), default="q5", show_default=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--window", type=int, default=10_000, show_default=True)
@click.option("--slide", type=int, default=10, show_default=True)
@click.option("--check", is_flag=True, help="Also run the engine on the trace and compare.")
@click.option("--threads", type=int, default=2, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the oracle output as JSON.")
def bench_oracle(query, input_path, window, slide, check, threads, out):
    """Replay a recorded trace through the brute-force oracle."""
    from .nexmark.generator import read_trace
    from .nexmark.oracle import run_oracle
    from .nexmark.queries import run_query

    config, events = read_trace(input_path)
    params = _query_params(window, slide)
    expected = run_oracle(query, events, params, config.distinct_keys)
    click.echo(f"{query}: {len(events)} events, {sum(expected.values())} result rows "
               f"({len(expected)} distinct)")
    if out:
        with open(out, "w") as f:
            json.dump(sorted([repr(k), v] for k, v in expected.items()), f)
    if check:
        got = run_query(query, events, params, threads=threads)
        if got != expected:
            missing = sum((expected - got).values())
            extra = sum((got - expected).values())
            click.echo(f"MISMATCH: {missing} rows missing, {extra} unexpected")
            sys.exit(1)
        click.echo("engine output equals the oracle")


# ------------------------------------------------------------------ cluster


@main.group()
def cluster():
    """Cluster membership."""


@cluster.command("start")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=5701, show_default=True, help="0 picks a free port.")
@click.option("--join", default=None, help="host:port of any member; omit to start a new cluster.")
@click.option("--threads", type=int, default=2, show_default=True)
@click.option("--backup-count", type=int, default=1, show_default=True)
@click.option("--partitions", type=int, default=271, show_default=True)
@click.option("--heartbeat-timeout", type=float, default=5.0, show_default=True)
@click.option("--metrics-file", type=click.Path(dir_okay=False), default=None,
              help="Rewrite this JSON file with engine metrics every second.")
def cluster_start(host, port, join, threads, backup_count, partitions, heartbeat_timeout, metrics_file):
    """Start a node and run until interrupted or told to shut down."""
    from .cluster.node import ClusterNode

    node = ClusterNode(host, port, join=join, threads=threads, partition_count=partitions,
                       backup_count=backup_count, heartbeat_timeout_s=heartbeat_timeout,
                       metrics_file=metrics_file).start()
    click.echo(f"node {node.node_id} listening on {node.address}")
    sys.stdout.flush()
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    while not stop.wait(0.2) and not node.shutdown_requested.is_set():
        pass
    node.shutdown()


def _client_call(address, kind, body=None, timeout=60.0):
    from .transport.net import Network

    net = Network(0)
    try:
        conn = net.connect(address)
        return net.call(conn.peer_id, kind, body, timeout=timeout)
    finally:
        net.close()


@cluster.command("info")
@click.option("--address", required=True, help="host:port of any member.")
def cluster_info(address):
    """Print a member's view of the cluster."""
    from .cluster.node import C_INFO

    click.echo(json.dumps(_client_call(address, C_INFO), indent=2, default=str))


@cluster.command("shutdown")
@click.option("--address", required=True, help="host:port of the member to stop.")
def cluster_shutdown(address):
    """Ask one member to shut down."""
    from .cluster.node import C_SHUTDOWN

    _client_call(address, C_SHUTDOWN)


# ------------------------------------------------------------------ jobs


@main.group()
def job():
    """Submit jobs to a running cluster."""


@job.command("submit")
@click.option("--address", required=True, help="host:port of any member.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSON job config.")
@click.option("--wait/--no-wait", default=True, show_default=True)
def job_submit(address, config_path, wait):
    """Submit a JSON job config; prints the job id or, with --wait, the result."""
    from .cluster.node import J_SUBMIT, J_WAIT

    try:
        with open(config_path) as f:
            cfg = JobConfig.from_json(f.read())
    except (ValueError, TypeError) as e:
        raise click.BadParameter(str(e))
    if cfg.dag_factory.endswith(":nexmark_dag") and "start_wall" not in cfg.config:
        # every member must agree on when event time 0 occurs
        cfg.config["start_wall"] = time.time() + 2.0
    from .transport.net import Network

    net = Network(0)
    try:
        peer = net.connect(address).peer_id
        job_id = net.call(peer, J_SUBMIT, cfg.to_dict())
        if not wait:
            click.echo(json.dumps({"job_id": job_id}))
            return
        result = net.call(peer, J_WAIT, (job_id, cfg.timeout_s), timeout=cfg.timeout_s + 60)
    finally:
        net.close()
    click.echo(json.dumps(result, indent=2, default=str))
    if result["status"] != "completed":
        sys.exit(1)


if __name__ == "__main__":
    main()
