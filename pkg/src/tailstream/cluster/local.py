"""A cluster of local processes for benchmarks and failure tests.

The calling process hosts the first node (the master, which coordinates
jobs). Every other member is a ``tailstream cluster start`` child process
that joins it, so killing one of them is a real process crash.
"""

from __future__ import annotations

import os
import re
import signal
import subprocess
import sys
import tempfile
import time

from .node import ClusterNode

_JOINED = re.compile(r"node (\d+) listening on (\S+)")


class LocalCluster:
    def __init__(self, workers: int, threads: int = 2, backup_count: int = 1,
                 heartbeat_timeout_s: float = 5.0, log_dir=None):
        self.workers = workers
        self.threads = threads
        self.backup_count = backup_count
        self.heartbeat_timeout_s = heartbeat_timeout_s
        self.log_dir = log_dir or tempfile.mkdtemp(prefix="tailstream-cluster-")
        self.node = None
        self.processes = {}  # member id -> Popen

    def start(self, timeout: float = 60.0) -> "LocalCluster":
        self.node = ClusterNode(threads=self.threads, backup_count=self.backup_count,
                                heartbeat_timeout_s=self.heartbeat_timeout_s).start()
        for i in range(self.workers):
            # one at a time, so member ids follow spawn order
            self._spawn(i, timeout)
        self.node.wait_for_members(self.workers + 1, timeout)
        return self

    def _spawn(self, index, timeout):
        log_path = os.path.join(self.log_dir, f"worker-{index}.log")
        log = open(log_path, "w")
        cmd = [sys.executable, "-m", "tailstream.cli", "cluster", "start", "--port", "0",
               "--join", self.node.address, "--threads", str(self.threads),
               "--backup-count", str(self.backup_count),
               "--heartbeat-timeout", str(self.heartbeat_timeout_s)]
        proc = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT)
        log.close()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with open(log_path) as f:
                m = _JOINED.search(f.read())
            if m:
                self.processes[int(m.group(1))] = proc
                return
            if proc.poll() is not None:
                break
            time.sleep(0.05)
        proc.kill()
        with open(log_path) as f:
            raise RuntimeError(f"worker {index} did not join:\n{f.read()[-2000:]}")

    @property
    def worker_ids(self) -> list:
        return sorted(self.processes)

    def kill(self, member_id: int):
        """SIGKILL a worker; the survivors see its connections drop."""
        proc = self.processes.pop(member_id)
        proc.send_signal(signal.SIGKILL)
        proc.wait()

    def close(self):
        if self.node is not None:
            self.node.shutdown()
            self.node = None
        for proc in self.processes.values():
            proc.terminate()
        for proc in self.processes.values():
            try:
                proc.wait(5)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.processes.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def nexmark_job(cfg, start_wall: float, sink=None) -> "JobConfig":
    """The job config for a :class:`~tailstream.nexmark.measure.BenchConfig`."""
    from .jobs import JobConfig

    return JobConfig(
        dag_factory="tailstream.cluster.jobs:nexmark_dag",
        name=f"nexmark-{cfg.query}",
        guarantee=cfg.guarantee if cfg.snapshot_interval_ms else "none",
        snapshot_interval_ms=cfg.snapshot_interval_ms,
        timeout_s=cfg.generator.duration_s + 300.0,
        config={
            "query": cfg.query,
            "generator": cfg.generator.to_dict(),
            "params": cfg.params.to_dict(),
            "start_wall": start_wall,
            "sink": sink or {"kind": "latency"},
            "cooperative_source": cfg.cooperative_source,
            "source_parallelism": cfg.source_parallelism,
        },
    )


def run_cluster_benchmark(cfg, nodes: int, start_delay_s: float = 2.0) -> dict:
    """Run a benchmark on ``nodes`` local processes; same result shape as a local run."""
    from ..nexmark.histogram import LatencyHistogram
    from ..nexmark.measure import make_results

    with LocalCluster(nodes - 1, threads=cfg.threads) as cluster:
        start_wall = time.time() + start_delay_s
        result = cluster.node.run_job(nexmark_job(cfg, start_wall))
    if result["status"] != "completed":
        raise RuntimeError(f"benchmark job {result['status']}: {result['failure']}")
    hist = LatencyHistogram.from_dict(result["histogram"]) if result["histogram"] else LatencyHistogram()
    elapsed = max(cfg.generator.duration_s, 1e-9)
    metrics = result["metrics"]
    results = make_results(cfg, hist, metrics.get("released", 0) / elapsed, metrics, result["snapshots_taken"])
    results["nodes"] = nodes
    results["restarts"] = result["restarts"]
    return results
