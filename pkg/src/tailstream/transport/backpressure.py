"""Flow-control experiment over a real loopback connection.

A paced producer feeds one sender tasklet; the receiver on a second
:class:`Network` hands items to a consumer throttled to a fixed rate. The
sampled receiver buffer, receive window and sender progress show whether
backpressure holds the sender to the consumer's pace.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

from ..dag import EdgeSpec
from ..items import Event
from ..scheduler import EngineConfig, ExecutionService
from ..tasklets import ExecutionControl
from .net import ExchangeRouter, Network, NetworkExchange
from .spsc import SpscQueue

EXEC_KEY = 1


@dataclass
class BackpressureReport:
    duration_s: float
    sent: int
    received: int
    consumed: int
    processed: int = 0
    out_of_order: int = 0
    granted_windows: list = field(default_factory=list)  # every window the receiver advertised
    # (seconds since start, receiver-side buffered items, current window size, items sent so far,
    #  items in flight at the sender)
    samples: list = field(default_factory=list)

    def rate_between(self, t0: float, t1: float) -> float:
        """Sender rate (items/s) between two sample times."""
        a = min(self.samples, key=lambda s: abs(s[0] - t0))
        b = min(self.samples, key=lambda s: abs(s[0] - t1))
        return (b[3] - a[3]) / max(b[0] - a[0], 1e-9)

    def steady(self, after_s: float) -> list:
        return [s for s in self.samples if s[0] >= after_s]


class _Throttle:
    """Token bucket releasing ``rate`` items per second (``None`` = stalled)."""

    def __init__(self, rate):
        self.rate = rate
        self.start = time.monotonic()
        self.taken = 0

    def allowance(self) -> int:
        if not self.rate:
            return 0
        return int((time.monotonic() - self.start) * self.rate) - self.taken


def run_backpressure(source_rate: float, sink_rate, duration_s: float, sample_every_s: float = 0.05,
                     ack_period: float = 0.1, queue_capacity: int = 256,
                     total_items: Optional[int] = None) -> BackpressureReport:
    """Run the experiment; ``sink_rate=0`` stalls the consumer entirely.

    ``total_items`` caps the producer so that conservation can be checked
    once everything has drained.
    """
    edge = EdgeSpec("src", "dst").distributed()
    vertex_ids = {"src": 0, "dst": 1}
    a, b = Network(1), Network(2)
    a.listen()
    b.listen()
    service = ExecutionService(EngineConfig(cooperative_thread_count=1))
    stop = threading.Event()
    try:
        ExchangeRouter(a).add(ex_a := NetworkExchange(a, EXEC_KEY, vertex_ids, ack_period=ack_period))
        ExchangeRouter(b).add(ex_b := NetworkExchange(b, EXEC_KEY, vertex_ids, ack_period=ack_period))
        a.connect(b.address)
        deadline = time.monotonic() + 5
        while 1 not in b.connections and time.monotonic() < deadline:
            time.sleep(0.01)

        execution = SimpleNamespace(control=ExecutionControl())
        source_q = SpscQueue(queue_capacity)
        sink_q = SpscQueue(queue_capacity)
        sender = ex_a.sender(execution, SimpleNamespace(edge=edge, remote_node=2, local_index=0, id="send"),
                             source_q)
        receiver = ex_b.receiver(execution, SimpleNamespace(edge=edge, remote_node=1, id="recv"), [[sink_q]])
        service.start(name_prefix="bp")
        service.submit([sender, receiver])

        counters = {"produced": 0, "consumed": 0, "out_of_order": 0}
        limit = total_items if total_items is not None else float("inf")

        def produce():
            start = time.monotonic()
            seq = 0
            while not stop.is_set():
                due = int(min((time.monotonic() - start) * source_rate, limit)) - seq
                if due <= 0 or source_q.remaining_capacity() == 0:
                    time.sleep(0.001)
                    continue
                batch = [Event(seq + i, seq + i) for i in range(min(due, 256))]
                seq += source_q.offer_all(batch)
                counters["produced"] = seq

        def consume():
            throttle = _Throttle(sink_rate)
            expected = 0
            while not stop.is_set():
                n = throttle.allowance()
                got = sink_q.poll_batch(n) if n > 0 else []
                for item in got:
                    if item.payload != expected:
                        counters["out_of_order"] += 1
                    expected = item.payload + 1
                throttle.taken += len(got)
                counters["consumed"] += len(got)
                if not got:
                    time.sleep(0.001)

        threads = [threading.Thread(target=f, daemon=True) for f in (produce, consume)]
        for t in threads:
            t.start()
        report = BackpressureReport(duration_s, 0, 0, 0)
        start = time.monotonic()
        while (now := time.monotonic()) - start < duration_s:
            buffered = receiver.received - counters["consumed"]
            window = receiver.windows[0].window_size
            report.samples.append((now - start, buffered, window, sender.next_seq - 1, sender.in_flight()))
            time.sleep(sample_every_s)
        stop.set()
        for t in threads:
            t.join(2)
        report.sent = sender.next_seq - 1
        report.received = receiver.received
        report.consumed = counters["consumed"]
        report.processed = receiver.processed[0]
        report.out_of_order = counters["out_of_order"]
        report.granted_windows = [entry[2] for entry in receiver.window_log]
        execution.control.cancel()
        return report
    finally:
        stop.set()
        service.shutdown()
        a.close()
        b.close()
