"""TCP connections between nodes, request/reply messaging, and the exchange.

There is one connection per node pair. The newer member dials the older one.
Each connection has a reader thread, which decodes frames, and a writer
thread, which drains an outgoing byte queue. Both are dedicated,
non-cooperative threads.

Frame kinds are handled in two ways. Data-path frames (DATA, BARRIER,
WATERMARK, ACK) are handled directly on the reader thread. They are handed
to :class:`NetworkExchange`, which delivers them to receiver tasklets and
sender windows. CONTROL frames carry ``(kind, request_id, body)`` messages.
Requests are executed on a small thread pool, so a handler may itself wait
for other replies.
"""

from __future__ import annotations

import itertools
import logging
import pickle
import queue
import socket
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor

from ..items import Barrier, Event, Watermark
from ..tasklets import ReceiverTasklet, SenderTasklet
from .flow import SenderWindow
from .wire import (
    PREAMBLE_SIZE, FrameDecoder, FrameKind, WireFrame, ack_frame, control_frame, data_frame,
    decode_preamble, encode_preamble, item_frame,
)

log = logging.getLogger(__name__)

# control message kinds used by this module
REPLY = "reply"
ERROR = "error"
NOTIFY = 0  # request id of messages that expect no reply


class PeerLost(ConnectionError):
    pass


class RemoteError(RuntimeError):
    pass


def _recv_exact(sock, n):
    data = b""
    while len(data) < n:
        chunk = sock.recv(n - len(data))
        if not chunk:
            raise ConnectionError("connection closed during handshake")
        data += chunk
    return data


class Connection:
    """One established TCP connection to a peer node."""

    def __init__(self, sock, peer_id, on_frame, on_close, name=""):
        self.sock = sock
        self.peer_id = peer_id
        self.on_frame = on_frame
        self.on_close = on_close
        self.name = name
        self.last_seen = time.monotonic()
        self.bytes_out = 0
        self.bytes_in = 0
        self._out = queue.SimpleQueue()
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"net-read-{name}")
        self._writer = threading.Thread(target=self._write_loop, daemon=True, name=f"net-write-{name}")

    def start(self):
        self._reader.start()
        self._writer.start()
        return self

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, frame: WireFrame):
        if self._closed.is_set():
            raise PeerLost(f"connection to node {self.peer_id} is closed")
        self._out.put(frame.encode())

    def _write_loop(self):
        try:
            while not self._closed.is_set():
                data = self._out.get()
                if data is None:
                    break
                parts = [data]
                # coalesce whatever else is already waiting into one syscall
                while len(parts) < 256:
                    try:
                        more = self._out.get_nowait()
                    except queue.Empty:
                        break
                    if more is None:
                        self._out.put(None)
                        break
                    parts.append(more)
                blob = b"".join(parts)
                self.sock.sendall(blob)
                self.bytes_out += len(blob)
        except OSError as e:
            log.debug("write to node %s failed: %r", self.peer_id, e)
        finally:
            self.close()

    def _read_loop(self):
        decoder = FrameDecoder()
        try:
            while not self._closed.is_set():
                data = self.sock.recv(1 << 16)
                if not data:
                    break
                self.last_seen = time.monotonic()
                self.bytes_in += len(data)
                for frame in decoder.feed(data):
                    self.on_frame(self, frame)
        except OSError as e:
            log.debug("read from node %s failed: %r", self.peer_id, e)
        except Exception:
            log.exception("error handling a frame from node %s", self.peer_id)
        finally:
            self.close()

    def close(self):
        if self._closed.is_set():
            return
        self._closed.set()
        self._out.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        if self.on_close is not None:
            self.on_close(self)


class Network:
    """Listener, connections and request/reply messaging for one node.

    ``handlers[kind](sender, body)`` serves requests. The return value is
    sent back as the reply. Raising sends an error reply. Returning a
    :class:`Future` replies when the future resolves.
    """

    def __init__(self, node_id: int = 0, host: str = "127.0.0.1", port: int = 0, workers: int = 8):
        self.node_id = node_id
        self.host = host
        self.port = port
        self.handlers = {}
        self.data_handler = None  # frame -> None, for data-path frames
        self.on_peer_lost = []  # callbacks(peer_id)
        self.connections = {}  # peer id -> Connection
        self._pending = {}  # request id -> (peer, Future)
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="net-rpc")
        self._listener = None
        self._closed = False

    # -------------------------------------------------------------- setup

    def listen(self):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((self.host, self.port))
        s.listen(64)
        self.port = s.getsockname()[1]
        self._listener = s
        threading.Thread(target=self._accept_loop, daemon=True, name="net-accept").start()
        return self

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handshake_in, args=(sock,), daemon=True).start()

    def _handshake_in(self, sock):
        try:
            sock.settimeout(10.0)
            peer = decode_preamble(_recv_exact(sock, PREAMBLE_SIZE))
            sock.sendall(encode_preamble(self.node_id))
            sock.settimeout(None)
        except Exception as e:
            log.warning("rejected incoming connection: %r", e)
            sock.close()
            return
        self._register(sock, peer)

    def connect(self, address: str, timeout: float = 10.0) -> Connection:
        host, port = parse_address(address)
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.sendall(encode_preamble(self.node_id))
        peer = decode_preamble(_recv_exact(sock, PREAMBLE_SIZE))
        sock.settimeout(None)
        return self._register(sock, peer)

    def _register(self, sock, peer) -> Connection:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if peer == 0:
            # a node that has not been given an id yet; keep it apart from members
            peer = -next(self._ids)
        conn = Connection(sock, peer, self._on_frame, self._on_close, name=f"{self.node_id}-{peer}")
        with self._lock:
            old = self.connections.get(peer)
            self.connections[peer] = conn
        if old is not None and old is not conn:
            old.on_close = None
            old.close()
        return conn.start()

    def close(self):
        self._closed = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self.connections.values())
        for c in conns:
            c.on_close = None
            c.close()
        self._fail_pending(None, PeerLost("network closed"))
        self._pool.shutdown(wait=False)

    def disconnect(self, peer):
        conn = self.connections.get(peer)
        if conn is not None:
            conn.close()

    # -------------------------------------------------------------- frames

    def send(self, peer, frame: WireFrame):
        conn = self.connections.get(peer)
        if conn is None:
            raise PeerLost(f"no connection to node {peer}")
        conn.send(frame)

    def _on_frame(self, conn, frame: WireFrame):
        if frame.kind != FrameKind.CONTROL:
            if self.data_handler is not None:
                self.data_handler(frame)
            return
        kind, rid, body = frame.object()
        if kind == REPLY or kind == ERROR:
            with self._lock:
                entry = self._pending.pop(rid, None)
            if entry is not None:
                fut = entry[1]
                if kind == REPLY:
                    fut.set_result(body)
                else:
                    fut.set_exception(RemoteError(body))
            return
        handler = self.handlers.get(kind)
        if handler is None:
            if rid != NOTIFY:
                self._reply(conn.peer_id, ERROR, rid, f"no handler for {kind!r}")
            return
        self._pool.submit(self._serve, conn.peer_id, handler, kind, rid, body)

    def _serve(self, peer, handler, kind, rid, body):
        try:
            result = handler(peer, body)
        except Exception as e:
            log.debug("request %s from %s failed: %r", kind, peer, e)
            if rid != NOTIFY:
                self._reply(peer, ERROR, rid, f"{type(e).__name__}: {e}")
            return
        if rid == NOTIFY:
            return
        if isinstance(result, Future):
            def done(f):
                if f.exception() is not None:
                    self._reply(peer, ERROR, rid, f"{type(f.exception()).__name__}: {f.exception()}")
                else:
                    self._reply(peer, REPLY, rid, f.result())
            result.add_done_callback(done)
        else:
            self._reply(peer, REPLY, rid, result)

    def _reply(self, peer, kind, rid, body):
        try:
            self.send(peer, control_frame(self.node_id, (kind, rid, body)))
        except PeerLost:
            pass

    def request(self, peer, kind, body=None) -> Future:
        """Send a request; the future fails with :class:`PeerLost` if the peer goes away."""
        fut = Future()
        rid = next(self._ids)
        with self._lock:
            self._pending[rid] = (peer, fut)
        try:
            self.send(peer, control_frame(self.node_id, (kind, rid, body)))
        except PeerLost as e:
            with self._lock:
                self._pending.pop(rid, None)
            fut.set_exception(e)
        return fut

    def call(self, peer, kind, body=None, timeout: float = 30.0):
        return self.request(peer, kind, body).result(timeout)

    def notify(self, peer, kind, body=None):
        try:
            self.send(peer, control_frame(self.node_id, (kind, NOTIFY, body)))
        except PeerLost:
            pass

    def _on_close(self, conn):
        with self._lock:
            if self.connections.get(conn.peer_id) is conn:
                del self.connections[conn.peer_id]
            else:
                return
        self._fail_pending(conn.peer_id, PeerLost(f"node {conn.peer_id} disconnected"))
        if self._closed:
            return
        for cb in list(self.on_peer_lost):
            try:
                cb(conn.peer_id)
            except Exception:
                log.exception("peer-lost callback failed")

    def _fail_pending(self, peer, exc):
        with self._lock:
            rids = [rid for rid, (p, _) in self._pending.items() if peer is None or p == peer]
            futs = [self._pending.pop(rid)[1] for rid in rids]
        for f in futs:
            if not f.done():
                f.set_exception(exc)


def parse_address(address: str):
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


# ------------------------------------------------------------------ exchange


def _frame_kind(items):
    if len(items) == 1:
        cls = items[0].__class__
        if cls is Watermark:
            return FrameKind.WATERMARK
        if cls is Barrier:
            return FrameKind.BARRIER
    return FrameKind.DATA


class NetworkExchange:
    """Sender and receiver tasklets of one execution, wired to the network.

    Frames of an execution carry its ``exec_key`` in the job field. Each
    edge is identified on the wire by its destination vertex id and
    ordinal. Frames from stale executions are dropped.
    """

    def __init__(self, network: Network, exec_key: int, vertex_ids: dict, ack_period=None,
                 window_floor=None, window_ceiling=None):
        self.network = network
        self.exec_key = exec_key
        self.vertex_ids = vertex_ids
        self.ack_period = ack_period
        self.window_floor = window_floor
        self.window_ceiling = window_ceiling
        self.receivers = {}  # (remote node, vertex id, ordinal) -> ReceiverTasklet
        self.windows = {}  # (remote node, vertex id, ordinal, local instance) -> SenderWindow
        self.senders = []

    def _edge_id(self, edge):
        return self.vertex_ids[edge.dest], edge.dest_ordinal

    def sender(self, execution, spec, queue_):
        vid, ordinal = self._edge_id(spec.edge)
        remote, me, key, inst = spec.remote_node, self.network.node_id, self.exec_key, spec.local_index
        initial = self.window_floor if self.window_floor is not None else SenderWindow().window_size
        window = SenderWindow(initial)
        self.windows[(remote, vid, ordinal, inst)] = window
        network = self.network

        def transmit(first_seq, items):
            try:
                _transmit(first_seq, items)
            except PeerLost:
                # the coordinator cancels and restarts the execution; nothing to do here
                pass

        def _transmit(first_seq, items):
            # control items travel in frames of their own kind
            run_start = 0
            seq = first_seq
            for i, item in enumerate(items):
                if item.__class__ is not Event:
                    if i > run_start:
                        network.send(remote, data_frame(key, vid, ordinal, me, inst, seq, items[run_start:i]))
                        seq += i - run_start
                    kind = _frame_kind([item])
                    network.send(remote, item_frame(kind, key, vid, ordinal, me, inst, seq, item))
                    seq += 1
                    run_start = i + 1
            if run_start < len(items):
                network.send(remote, data_frame(key, vid, ordinal, me, inst, seq, items[run_start:]))

        t = SenderTasklet(spec.id, queue_, transmit, execution.control, window)
        self.senders.append(t)
        return t

    def receiver(self, execution, spec, outs):
        vid, ordinal = self._edge_id(spec.edge)
        remote, me, key = spec.remote_node, self.network.node_id, self.exec_key
        network = self.network

        def send_ack(ack):
            try:
                network.send(remote, ack_frame(key, vid, me, ack))
            except PeerLost:
                pass

        kwargs = {}
        if self.ack_period is not None:
            kwargs["ack_period"] = self.ack_period
        t = ReceiverTasklet(spec.id, spec.edge, outs, send_ack, execution.control,
                            window_floor=self.window_floor, window_ceiling=self.window_ceiling, **kwargs)
        self.receivers[(remote, vid, ordinal)] = t
        return t

    def on_frame(self, frame: WireFrame):
        """Data-path frame handler; runs on connection reader threads."""
        if frame.job_id != self.exec_key:
            return False
        if frame.kind == FrameKind.ACK:
            ack = frame.ack()
            w = self.windows.get((frame.sender_node, frame.vertex_id, frame.ordinal, ack.sender_instance))
            if w is not None:
                w.on_ack(ack)
            return True
        r = self.receivers.get((frame.sender_node, frame.vertex_id, frame.ordinal))
        if r is None:
            log.warning("no receiver for frame %s from node %s", frame.kind.name, frame.sender_node)
            return True
        sender_instance, first_seq, items = pickle.loads(frame.payload)
        r.deliver(sender_instance, first_seq, items)
        return True


class ExchangeRouter:
    """Dispatches data-path frames to the exchange of the execution they belong to."""

    def __init__(self, network: Network):
        self.exchanges = {}
        network.data_handler = self.on_frame

    def add(self, exchange: NetworkExchange):
        self.exchanges[exchange.exec_key] = exchange

    def remove(self, exec_key):
        self.exchanges.pop(exec_key, None)

    def on_frame(self, frame):
        ex = self.exchanges.get(frame.job_id)
        if ex is not None:
            ex.on_frame(frame)
