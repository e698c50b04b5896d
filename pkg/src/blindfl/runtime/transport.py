"""Frame transports between numbered nodes.

Both implementations move raw encoded frames; they never look inside.  The
in-process transport is a set of FIFO queues and is fully deterministic.
The socket transport gives each node a loopback listener and a reader
thread, and streams frames over TCP (frames are self-delimiting).
"""

from __future__ import annotations

import collections
import queue
import socket
import threading

from .codec import _FRAME_HEAD, frame_length


class TransportError(RuntimeError):
    pass


class Transport:
    def register(self, node: int) -> None:
        raise NotImplementedError

    def send(self, dest: int, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, node: int, timeout: float | None = None) -> bytes | None:
        """Next frame for ``node`` or None if nothing arrives in time."""
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessTransport(Transport):
    def __init__(self):
        self._queues: dict[int, collections.deque] = {}

    def register(self, node: int) -> None:
        self._queues.setdefault(node, collections.deque())

    def send(self, dest: int, frame: bytes) -> None:
        if dest not in self._queues:
            raise TransportError(f"unknown destination {dest}")
        self._queues[dest].append(bytes(frame))

    def recv(self, node: int, timeout: float | None = None) -> bytes | None:
        q = self._queues[node]
        return q.popleft() if q else None

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


def _read_exact(conn: socket.socket, size: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < size:
        chunk = conn.recv(size - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf += chunk
    return bytes(buf)


class SocketTransport(Transport):
    """Loopback TCP; one listener and reader thread per registered node."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self._inbox: dict[int, queue.Queue] = {}
        self._listeners: dict[int, socket.socket] = {}
        self._ports: dict[int, int] = {}
        self._out: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self.errors: list[BaseException] = []

    def register(self, node: int) -> None:
        if node in self._listeners:
            return
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.host, 0))
        srv.listen()
        self._listeners[node] = srv
        self._ports[node] = srv.getsockname()[1]
        self._inbox[node] = queue.Queue()
        t = threading.Thread(target=self._accept_loop, args=(node, srv), daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, node: int, srv: socket.socket) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(node, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, node: int, conn: socket.socket) -> None:
        with conn:
            while not self._closed.is_set():
                try:
                    head = _read_exact(conn, _FRAME_HEAD.size)
                    if head is None:
                        return
                    if len(head) < _FRAME_HEAD.size:
                        raise TransportError("connection closed inside a frame header")
                    rest = _read_exact(conn, frame_length(head) - len(head))
                    if rest is None or len(rest) < frame_length(head) - len(head):
                        raise TransportError("connection closed inside a frame")
                except (OSError, ValueError, TransportError) as exc:
                    if not self._closed.is_set():
                        self.errors.append(exc)
                    return
                self._inbox[node].put(head + rest)

    def send(self, dest: int, frame: bytes) -> None:
        if dest not in self._ports:
            raise TransportError(f"unknown destination {dest}")
        with self._lock:
            conn = self._out.get(dest)
            if conn is None:
                conn = socket.create_connection((self.host, self._ports[dest]))
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._out[dest] = conn
            conn.sendall(frame)

    def recv(self, node: int, timeout: float | None = None) -> bytes | None:
        try:
            if timeout is None or timeout <= 0:
                return self._inbox[node].get_nowait()
            return self._inbox[node].get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()
        for s in list(self._out.values()) + list(self._listeners.values()):
            try:
                s.close()
            except OSError:
                pass
        self._out.clear()


def make_transport(kind: str) -> Transport:
    if kind == "inprocess":
        return InProcessTransport()
    if kind == "socket":
        return SocketTransport()
    raise TransportError(f"unknown transport {kind!r}")
