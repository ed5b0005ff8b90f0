"""Cooperative execution of tasklets on a fixed pool of worker threads.

Each worker loops over its tasklets round-robin, calling each one once per
pass. A pass in which nothing made progress parks the worker for an
exponentially growing period (``backoff_min`` doubling up to
``backoff_max``); any progress resets the park time. Blocking work runs on
dedicated threads with the same backoff.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
import time
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

log = logging.getLogger(__name__)


class ProgressState(enum.Enum):
    MADE_PROGRESS = 1
    NO_PROGRESS = 2
    DONE = 3


MADE_PROGRESS = ProgressState.MADE_PROGRESS
NO_PROGRESS = ProgressState.NO_PROGRESS
DONE = ProgressState.DONE


class Tasklet:
    """A unit of cooperative work. ``call`` must return quickly and never block."""

    is_cooperative = True
    name = "tasklet"

    def init(self):
        pass

    def call(self) -> ProgressState:
        raise NotImplementedError

    def close(self):
        pass

    def fail(self, exc: BaseException):
        """Invoked by the worker when ``call`` raised; default just logs."""
        log.error("tasklet %s failed: %r", self.name, exc)


@dataclass
class EngineConfig:
    cooperative_thread_count: int = field(default_factory=lambda: os.cpu_count() or 1)
    backoff_min: float = 25e-6
    backoff_max: float = 1e-3
    noncooperative_report_interval: float = 1.0
    inbox_batch: int = 1024
    metrics_file: Optional[str] = None
    metrics_interval: float = 1.0

    def __post_init__(self):
        cores = os.cpu_count() or 1
        if self.cooperative_thread_count < 1:
            raise ValueError("cooperative_thread_count must be >= 1")
        if self.cooperative_thread_count > cores:
            warnings.warn(
                f"{self.cooperative_thread_count} cooperative threads on {cores} cores",
                RuntimeWarning,
                stacklevel=3,
            )
        if not 0 < self.backoff_min <= self.backoff_max:
            raise ValueError("need 0 < backoff_min <= backoff_max")
        self.noncooperative_report_interval = min(self.noncooperative_report_interval, 1.0)


@dataclass
class WorkerMetrics:
    passes: int = 0
    calls: int = 0
    parks: int = 0
    park_time: float = 0.0
    tasklets_done: int = 0
    faults: int = 0


class CooperativeWorker:
    """One cooperative thread and the tasklets it owns."""

    def __init__(self, index: int, config: EngineConfig):
        self.index = index
        self.config = config
        self.tasklets = []
        self.metrics = WorkerMetrics()
        self.backoff = config.backoff_min
        self._mailbox = deque()
        self._wakeup = threading.Event()
        self._shutdown = False
        self._thread = None

    # mailbox: callable from any thread; applied between passes

    def add(self, tasklet: Tasklet):
        self._mailbox.append(("add", tasklet))
        self._wakeup.set()

    def remove(self, tasklet: Tasklet):
        self._mailbox.append(("remove", tasklet))
        self._wakeup.set()

    def _apply_mailbox(self):
        mailbox = self._mailbox
        while mailbox:
            op, tasklet = mailbox.popleft()
            if op == "add":
                self.tasklets.append(tasklet)
            elif tasklet in self.tasklets:
                self.tasklets.remove(tasklet)
                _safe_close(tasklet)

    def run_pass(self) -> bool:
        """Call every live tasklet once; returns True if any made progress."""
        self._apply_mailbox()
        progressed = False
        finished = None
        for tasklet in self.tasklets:
            try:
                state = tasklet.call()
            except Exception as exc:  # a faulty tasklet fails its job, not the worker
                self.metrics.faults += 1
                state = DONE
                try:
                    tasklet.fail(exc)
                except Exception:
                    log.exception("failure handler of %s raised", tasklet)
            if state is MADE_PROGRESS:
                progressed = True
            elif state is DONE:
                progressed = True
                if finished is None:
                    finished = []
                finished.append(tasklet)
        self.metrics.passes += 1
        self.metrics.calls += len(self.tasklets)
        if finished:
            done = set(map(id, finished))
            self.tasklets = [t for t in self.tasklets if id(t) not in done]
            for t in finished:
                _safe_close(t)
            self.metrics.tasklets_done += len(finished)
        return progressed

    def idle(self):
        """Park after a pass without progress."""
        self.metrics.parks += 1
        start = time.perf_counter()
        self._wakeup.wait(self.backoff)
        self._wakeup.clear()
        self.metrics.park_time += time.perf_counter() - start
        self.backoff = min(self.backoff * 2, self.config.backoff_max)

    def run(self):
        run_worker_loop(self)

    def start(self, name=None):
        self._thread = threading.Thread(
            target=self.run, name=name or f"coop-{self.index}", daemon=True
        )
        self._thread.start()
        return self

    def shutdown(self, join=True, timeout=5.0):
        self._shutdown = True
        self._wakeup.set()
        if join and self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)


def _safe_close(tasklet):
    try:
        tasklet.close()
    except Exception:
        log.exception("closing tasklet %s", getattr(tasklet, "name", tasklet))


def run_worker_loop(worker: CooperativeWorker):
    """Round-robin loop; returns only after :meth:`CooperativeWorker.shutdown`."""
    cfg = worker.config
    while not worker._shutdown:
        if worker.run_pass():
            worker.backoff = cfg.backoff_min
        else:
            worker.idle()


def run_dedicated(tasklet: Tasklet, config: EngineConfig, stop: threading.Event):
    """Body of a non-cooperative thread hosting a single blocking tasklet."""
    backoff = config.backoff_min
    try:
        tasklet.init()
    except Exception as exc:
        tasklet.fail(exc)
        _safe_close(tasklet)
        return
    while not stop.is_set():
        try:
            state = tasklet.call()
        except Exception as exc:
            tasklet.fail(exc)
            break
        if state is DONE:
            break
        if state is MADE_PROGRESS:
            backoff = config.backoff_min
        else:
            stop.wait(backoff)
            backoff = min(backoff * 2, config.backoff_max)
    _safe_close(tasklet)


def assign_tasklets(tasklets, config: EngineConfig):
    """Spread cooperative tasklets round-robin over the workers.

    Returns ``(per_worker_lists, dedicated)``; each non-cooperative tasklet
    gets its own thread.
    """
    workers = [[] for _ in range(config.cooperative_thread_count)]
    dedicated = []
    i = 0
    for t in tasklets:
        if getattr(t, "is_cooperative", True):
            workers[i % len(workers)].append(t)
            i += 1
        else:
            dedicated.append(t)
    return workers, dedicated


class ExecutionService:
    """A node's worker pool, shared by every job running on that node."""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()
        self.workers = [
            CooperativeWorker(i, self.config) for i in range(self.config.cooperative_thread_count)
        ]
        self._next = 0
        self._dedicated = []
        self._lock = threading.Lock()
        self._started = False
        self._metrics_stop = threading.Event()

    def start(self, name_prefix="coop"):
        if self._started:
            return self
        self._started = True
        for w in self.workers:
            w.start(f"{name_prefix}-{w.index}")
        if self.config.metrics_file:
            threading.Thread(target=self._metrics_loop, daemon=True, name="metrics").start()
        return self

    def submit(self, tasklets, worker_hint=None) -> list:
        """Init and schedule tasklets; returns the stop events of dedicated threads."""
        stops = []
        coop, dedicated = [], []
        for t in tasklets:
            (coop if getattr(t, "is_cooperative", True) else dedicated).append(t)
        for t in coop:
            t.init()
        with self._lock:
            for k, t in enumerate(coop):
                if worker_hint is not None:
                    idx = worker_hint[k] % len(self.workers)
                else:
                    idx = self._next % len(self.workers)
                    self._next += 1
                self.workers[idx].add(t)
        for t in dedicated:
            stop = threading.Event()
            th = threading.Thread(
                target=run_dedicated, args=(t, self.config, stop), daemon=True,
                name=f"blocking-{getattr(t, 'name', 'tasklet')}",
            )
            self._dedicated.append((th, stop))
            th.start()
            stops.append(stop)
        return stops

    def metrics(self) -> dict:
        return {
            "workers": [
                {
                    "index": w.index,
                    "tasklets": len(w.tasklets),
                    "passes": w.metrics.passes,
                    "calls": w.metrics.calls,
                    "parks": w.metrics.parks,
                    "park_time_s": round(w.metrics.park_time, 6),
                    "tasklets_done": w.metrics.tasklets_done,
                    "faults": w.metrics.faults,
                }
                for w in self.workers
            ],
            "dedicated_threads": sum(1 for th, _ in self._dedicated if th.is_alive()),
        }

    def write_metrics(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(self.metrics(), f, indent=2)
        os.replace(tmp, path)

    def _metrics_loop(self):
        while not self._metrics_stop.wait(self.config.metrics_interval):
            try:
                self.write_metrics(self.config.metrics_file)
            except OSError:
                log.exception("writing metrics file")

    def shutdown(self):
        self._metrics_stop.set()
        for w in self.workers:
            w.shutdown()
        for th, stop in self._dedicated:
            stop.set()
        for th, _ in self._dedicated:
            th.join(2.0)
