import pickle
import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailstream.dag import EdgeSpec
from tailstream.items import Event
from tailstream.tasklets import ReceiverTasklet, SenderTasklet
from tailstream.transport.backpressure import run_backpressure
from tailstream.transport.flow import (
    WINDOW_FLOOR, AckMessage, ReceiveWindowState, SenderWindow, sender_gate, update_receive_window,
)
from tailstream.transport.net import Network, RemoteError
from tailstream.transport.spsc import SpscQueue, offer, poll
from tailstream.transport.wire import (
    FrameDecoder, FrameKind, ProtocolError, WireFrame, ack_frame, data_frame, decode_preamble, encode_preamble,
)

# ------------------------------------------------------------ SPSC queue


def test_capacity_two_rejects_third_offer():
    q = SpscQueue(2)
    assert offer(q, "a") and offer(q, "b")
    assert not offer(q, "c")
    assert poll(q, 10) == ["a", "b"]


def test_offer_then_poll_returns_item():
    q = SpscQueue(4)
    q.offer("x")
    assert q.poll() == "x"
    assert q.poll() is None


def test_empty_queue_polls_empty_batch():
    assert poll(SpscQueue(8), 5) == []


def test_poll_respects_max_items():
    q = SpscQueue(8)
    for x in "abc":
        q.offer(x)
    assert poll(q, 2) == ["a", "b"]
    assert poll(q, 2) == ["c"]


def test_capacity_must_be_power_of_two():
    with pytest.raises(ValueError):
        SpscQueue(1000)


def test_offer_all_stops_at_capacity():
    q = SpscQueue(4)
    assert q.offer_all(list(range(6))) == 4
    assert q.remaining_capacity() == 0
    assert q.poll_batch(10) == [0, 1, 2, 3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 5)), max_size=100), st.sampled_from([1, 2, 4, 16]))
def test_interleaved_offers_and_polls_conserve_fifo(ops, capacity):
    q = SpscQueue(capacity)
    offered, taken, nxt = [], [], 0
    for is_offer, n in ops:
        if is_offer:
            for _ in range(n):
                if q.offer(nxt):
                    offered.append(nxt)
                    nxt += 1
        else:
            taken.extend(q.poll_batch(n))
        assert 0 <= len(q) <= capacity
    taken.extend(q.poll_batch(capacity))
    assert taken == offered


def test_concurrent_million_items_in_order():
    n = 1_000_000
    q = SpscQueue(1024)
    errors = []

    def produce():
        i = 0
        chunk = 512
        while i < n:
            accepted = q.offer_all(range(i, min(i + chunk, n)))
            i += accepted
            if not accepted:
                time.sleep(0)

    def consume():
        expected = 0
        while expected < n:
            batch = q.poll_batch(1024)
            if not batch:
                time.sleep(0)
                continue
            for x in batch:
                if x != expected:
                    errors.append((expected, x))
                    return
                expected += 1

    threads = [threading.Thread(target=produce), threading.Thread(target=consume)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120)
    assert not errors
    assert len(q) == 0


# ------------------------------------------------------------ receive window


def test_thousand_per_second_gives_window_300():
    state = ReceiveWindowState()
    ack = update_receive_window(state, 100, 0.1)
    assert ack.window_size == 300 == state.window_size
    assert ack.acked_seq == 100


def test_idle_stream_clamps_to_floor():
    state = ReceiveWindowState()
    assert update_receive_window(state, 0, 0.1).window_size == WINDOW_FLOOR


def test_ceiling_clamps_runaway_rate():
    state = ReceiveWindowState(ceiling=4096)
    assert update_receive_window(state, 10**9, 0.1).window_size == 4096


def test_rate_doubling_converges_to_twice_the_window():
    # oracle: EMA with alpha 0.5 from 1000 toward 2000 gives rate 2000 - 1000 * 0.5**k
    # after k periods; the window is round(0.3 * rate): 450, 525, 563 (562.5 rounds up), 581, 591
    state = ReceiveWindowState()
    update_receive_window(state, 100, 0.1)
    assert state.window_size == 300
    windows = [update_receive_window(state, 200, 0.1).window_size for _ in range(5)]
    assert windows == [450, 525, 563, 581, 591]
    assert abs(windows[-1] - 600) / 600 < 0.05


@settings(max_examples=200)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=30))
def test_window_never_below_floor_and_acked_is_total(counts):
    state = ReceiveWindowState()
    for c in counts:
        ack = update_receive_window(state, c, 0.1)
        assert state.floor <= ack.window_size <= state.ceiling
    assert state.acked_seq == sum(counts)


def test_sender_gate_boundary():
    state = ReceiveWindowState(acked_seq=0, window_size=10, floor=1)
    assert sender_gate(state, 10)
    assert not sender_gate(state, 11)
    state.acked_seq = 10
    assert sender_gate(state, 11)


def test_sender_window_ignores_stale_acks():
    w = SenderWindow(10)
    w.on_ack(AckMessage(0, 50, 20))
    w.on_ack(AckMessage(0, 40, 500))
    assert w.limit == 70 and w.allowance(61) == 10 and not w.may_send(71)


def _stalled_pair(window, items):
    """A sender whose receiver never acks."""
    src = SpscQueue(4096)
    src.offer_all([Event(i) for i in range(items)])
    sent = []
    sender = SenderTasklet("s", src, lambda first, batch: sent.extend(batch), window=SenderWindow(window),
                           batch=64)
    return sender, sent


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2000))
def test_sender_stops_after_one_window_without_acks(window, items):
    sender, sent = _stalled_pair(window, items)
    for _ in range(100):
        sender.call()
    assert len(sent) == min(window, items)
    assert sender.in_flight() <= window


def test_stalled_consumer_over_loopback():
    report = run_backpressure(source_rate=50_000, sink_rate=0, duration_s=2.0)
    assert report.consumed == 0
    # the sender went at most one advertised window past what the receiver handed downstream
    assert report.sent - report.processed <= max(report.granted_windows)
    # and it has stopped: no progress over the final half second
    assert report.samples[-1][3] == report.steady(1.5)[0][3]


def test_in_flight_stays_within_window_plus_batch():
    report = run_backpressure(source_rate=20_000, sink_rate=5_000, duration_s=3.0)
    batch = 1024
    for *_, in_flight in report.samples:
        assert in_flight <= max(report.granted_windows) + batch


def test_conservation_across_network_edge():
    total = 30_000
    report = run_backpressure(source_rate=100_000, sink_rate=1_000_000, duration_s=3.0, total_items=total)
    assert report.sent == report.received == report.consumed == total
    assert report.out_of_order == 0


def test_receiver_acks_every_period():
    clock = [0.0]
    acks = []
    out = SpscQueue(1024)
    r = ReceiverTasklet("r", EdgeSpec("a", "b").distributed(), [[out]], acks.append, clock=lambda: clock[0],
                        ack_period=0.1)
    r.deliver(0, 1, [Event(i) for i in range(100)])
    r.call()
    clock[0] = 0.1
    r.call()
    assert acks and acks[-1].acked_seq == 100 and acks[-1].window_size == 300


# ------------------------------------------------------------ wire format


def test_preamble_round_trip_and_rejection():
    assert decode_preamble(encode_preamble(7)) == 7
    bad = b"XXXX" + encode_preamble(7)[4:]
    with pytest.raises(ProtocolError):
        decode_preamble(bad)


def test_data_frame_round_trip():
    items = [Event("a", 1), Event(("k", 2), 5)]
    f = data_frame(3, 4, 1, 2, 0, 17, items)
    g = WireFrame.decode(f.encode())
    assert g == f and g.kind == FrameKind.DATA
    inst, first, decoded = g.object()
    assert (inst, first) == (0, 17)
    assert [(e.payload, e.event_time) for e in decoded] == [("a", 1), (("k", 2), 5)]


def test_ack_frame_round_trip():
    ack = AckMessage(2, 12345, 300, 1)
    assert WireFrame.decode(ack_frame(1, 2, 3, ack).encode()).ack() == ack


@settings(max_examples=100)
@given(st.lists(st.binary(max_size=200), min_size=1, max_size=10), st.integers(1, 50))
def test_decoder_reassembles_arbitrary_fragmentation(payloads, chunk):
    frames = [WireFrame(FrameKind.CONTROL, 1, 2, 3, 4, p) for p in payloads]
    stream = b"".join(f.encode() for f in frames)
    dec = FrameDecoder()
    got = []
    for i in range(0, len(stream), chunk):
        got.extend(dec.feed(stream[i:i + chunk]))
    assert got == frames


def test_decoder_rejects_garbage_length():
    with pytest.raises(ProtocolError):
        FrameDecoder().feed(b"\x01\x00\x00\x00" + b"\x00" * 8)


# ------------------------------------------------------------ network


@pytest.fixture
def pair():
    a, b = Network(1), Network(2)
    a.listen()
    b.listen()
    a.connect(b.address)
    deadline = time.monotonic() + 5
    while 1 not in b.connections and time.monotonic() < deadline:
        time.sleep(0.01)
    yield a, b
    a.close()
    b.close()


def test_request_reply_and_error(pair):
    a, b = pair
    b.handlers["echo"] = lambda peer, body: (peer, body)
    b.handlers["fail"] = lambda peer, body: 1 / 0
    assert a.call(2, "echo", [1, 2]) == (1, [1, 2])
    with pytest.raises(RemoteError):
        a.call(2, "fail")
    with pytest.raises(RemoteError):
        a.call(2, "missing")


def test_notify_is_delivered_in_order(pair):
    a, b = pair
    got = []
    done = threading.Event()

    def handler(peer, body):
        got.append(body)
        if len(got) == 50:
            done.set()

    b.handlers["n"] = handler
    for i in range(50):
        a.notify(2, "n", i)
    assert done.wait(5)
    assert sorted(got) == list(range(50))


def test_random_frames_delivered_in_order(pair):
    a, b = pair
    got = []
    done = threading.Event()

    def on_data(frame):
        got.append(frame.object())
        if len(got) == 200:
            done.set()

    b.data_handler = on_data
    values = [random.random() for _ in range(200)]
    for v in values:
        a.send(2, WireFrame(FrameKind.DATA, 1, 0, 0, 1, pickle.dumps(v)))
    assert done.wait(5)
    assert got == values
