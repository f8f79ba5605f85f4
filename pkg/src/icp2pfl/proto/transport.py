"""Ordered, reliable delivery of encoded frames between ring nodes.

Both transports move the exact bytes produced by :func:`wire.encode`; a
socket stream is split back into frames using the length in the header.
"""
from __future__ import annotations

import collections
import queue
import socket
import threading

from .wire import FRAME_OVERHEAD, HEADER_SIZE, read_header


class TransportError(RuntimeError):
    pass


class InProcessTransport:
    """Per-node FIFO queues inside one process; fully deterministic."""

    kind = "inproc"

    def __init__(self, node_ids):
        self.queues = {k: collections.deque() for k in node_ids}

    def send(self, src: int, dst: int, data: bytes):
        if dst not in self.queues:
            raise TransportError(f"unknown destination {dst}")
        self.queues[dst].append((src, bytes(data)))

    def recv(self, node_id: int, timeout: float | None = None):
        q = self.queues[node_id]
        if not q:
            raise TransportError(f"no frame waiting for node {node_id}")
        return q.popleft()

    def pending(self, node_id: int) -> int:
        return len(self.queues[node_id])

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TransportError("stream closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    """Read one frame from a stream socket; ``None`` on clean EOF."""
    head = _recv_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    _, _, n = read_header(head)
    rest = _recv_exact(sock, n + FRAME_OVERHEAD - HEADER_SIZE)
    if rest is None:
        raise TransportError("stream closed mid-frame")
    return head + rest


class SocketTransport:
    """TCP streams between nodes; one listening socket per node.

    ``addresses`` maps node id to ``(host, port)``; port 0 picks a free
    port.  Each connection starts with a 4-byte sender id, then carries
    raw frames back to back.
    """

    kind = "socket"

    def __init__(self, node_ids, addresses=None, timeout: float = 30.0):
        addresses = addresses or {}
        self.timeout = timeout
        self.inbox = {k: queue.Queue() for k in node_ids}
        self.listeners = {}
        self.addresses = {}
        self._out = {}
        self._threads = []
        self._closed = False
        self._errors = []
        for k in node_ids:
            host, port = addresses.get(k, ("127.0.0.1", 0))
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, port))
            srv.listen()
            self.listeners[k] = srv
            self.addresses[k] = srv.getsockname()
            t = threading.Thread(target=self._accept_loop, args=(k, srv), daemon=True)
            t.start()
            self._threads.append(t)

    def _accept_loop(self, k, srv):
        while not self._closed:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(k, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, k, conn):
        with conn:
            try:
                hello = _recv_exact(conn, 4)
                if hello is None:
                    return
                src = int.from_bytes(hello, "little")
                while True:
                    data = read_frame(conn)
                    if data is None:
                        return
                    self.inbox[k].put((src, data))
            except Exception as exc:  # surfaced to the receiver
                if not self._closed:
                    self._errors.append(exc)
                    self.inbox[k].put((None, exc))

    def send(self, src: int, dst: int, data: bytes):
        if dst not in self.addresses:
            raise TransportError(f"unknown destination {dst}")
        sock = self._out.get((src, dst))
        if sock is None:
            sock = socket.create_connection(self.addresses[dst], timeout=self.timeout)
            sock.sendall(src.to_bytes(4, "little"))
            self._out[(src, dst)] = sock
        sock.sendall(data)

    def recv(self, node_id: int, timeout: float | None = None):
        try:
            src, data = self.inbox[node_id].get(timeout=timeout or self.timeout)
        except queue.Empty:
            raise TransportError(f"timed out waiting for a frame at node {node_id}") from None
        if isinstance(data, Exception):
            raise TransportError(f"stream error at node {node_id}: {data}") from data
        return src, data

    def pending(self, node_id: int) -> int:
        return self.inbox[node_id].qsize()

    def close(self):
        self._closed = True
        for s in self._out.values():
            s.close()
        for s in self.listeners.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        for t in self._threads:
            t.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_transport(kind: str, node_ids, addresses=None):
    if kind == "inproc":
        return InProcessTransport(node_ids)
    if kind == "socket":
        return SocketTransport(node_ids, addresses)
    raise ValueError(f"unknown transport {kind!r}")
