"""Rendezvous protocol between launched processes and the launcher.

Newline-delimited text over TCP. Each process sends::

    REG <rank> <host:port> [vendor_key]

Once every process has registered, the launcher answers all of them with::

    TABLE <n>
    <n endpoint lines: rank host:port [vendor_key]>
    <n topology lines: rank depth c0 c1 c2 [c3]>
    GO

The ``GO`` line is the startup barrier release.
"""
from __future__ import annotations

import selectors
import socket
import time
from dataclasses import dataclass, field
from typing import Callable

from .errors import StartupError
from .topology import TopologyMap
from .transport import Endpoint


def _readline(f) -> str:
    line = f.readline()
    if not line:
        raise StartupError("rendezvous closed the connection before release")
    return line.decode().rstrip("\n")


def register(address: tuple[str, int], endpoint: Endpoint, timeout: float | None = 60.0):
    """Register with the rendezvous and block until release.

    Returns ``(endpoints, topology, release_time)`` where ``release_time`` is the
    wall-clock time the ``GO`` line was read.
    """
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise StartupError(f"cannot reach rendezvous at {address[0]}:{address[1]}: {exc}") from exc
    sock.settimeout(timeout)
    with sock, sock.makefile("rb") as f:
        try:
            sock.sendall(f"REG {endpoint.to_line()}\n".encode())
            head = _readline(f).split()
            if len(head) != 2 or head[0] != "TABLE":
                raise StartupError(f"unexpected rendezvous reply {head!r}")
            n = int(head[1])
            endpoints = {}
            for _ in range(n):
                ep = Endpoint.from_line(_readline(f))
                endpoints[ep.rank] = ep
            topo = TopologyMap.from_text("".join(_readline(f) + "\n" for _ in range(n)))
            if _readline(f) != "GO":
                raise StartupError("rendezvous did not send GO")
        except socket.timeout as exc:
            raise StartupError(f"timed out after {timeout}s waiting for startup barrier release") from exc
        release_time = time.time()
    return endpoints, topo, release_time


@dataclass
class RendezvousEvents:
    registrations: dict[int, float] = field(default_factory=dict)
    release_time: float | None = None
    releases_sent: int = 0


class Rendezvous:
    """Collect one registration per rank, then release everybody at once."""

    def __init__(self, topology: TopologyMap, host: str = "127.0.0.1",
                 on_register: Callable[[int], None] | None = None):
        self.topology = topology
        self.size = topology.world_size
        self.events = RendezvousEvents()
        self.on_register = on_register
        self._listener = socket.create_server((host, 0), backlog=max(16, self.size))
        self._conns: dict[int, socket.socket] = {}
        self._endpoints: dict[int, Endpoint] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def missing(self) -> list[int]:
        return [r for r in range(self.size) if r not in self._endpoints]

    def serve(self, timeout: float | None = 30.0, check: Callable[[], None] | None = None) -> None:
        """Run until all ranks registered and ``GO`` was sent.

        ``check`` is called periodically and may raise to abort startup.
        Raises StartupError on timeout.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        sel = selectors.DefaultSelector()
        sel.register(self._listener, selectors.EVENT_READ, None)
        buffers: dict[socket.socket, bytearray] = {}
        try:
            while len(self._endpoints) < self.size:
                if deadline is not None and time.monotonic() > deadline:
                    raise StartupError(
                        f"startup timed out after {timeout}s; unregistered ranks {self.missing()}"
                    )
                if check is not None:
                    check()
                for key, _ in sel.select(0.05):
                    if key.data is None:
                        conn, _ = self._listener.accept()
                        buffers[conn] = bytearray()
                        sel.register(conn, selectors.EVENT_READ, "conn")
                        continue
                    conn = key.fileobj
                    chunk = conn.recv(4096)
                    if not chunk:
                        sel.unregister(conn)
                        conn.close()
                        del buffers[conn]
                        continue
                    buffers[conn] += chunk
                    if b"\n" in buffers[conn]:
                        line = bytes(buffers[conn]).split(b"\n", 1)[0].decode()
                        sel.unregister(conn)
                        self._handle(conn, line)
            self._release()
        finally:
            sel.close()

    def _handle(self, conn: socket.socket, line: str) -> None:
        fields = line.split()
        if len(fields) < 3 or fields[0] != "REG":
            conn.close()
            return
        ep = Endpoint.from_line(" ".join(fields[1:]))
        if not 0 <= ep.rank < self.size or ep.rank in self._endpoints:
            conn.close()
            return
        self._endpoints[ep.rank] = ep
        self._conns[ep.rank] = conn
        self.events.registrations[ep.rank] = time.time()
        if self.on_register is not None:
            self.on_register(ep.rank)

    def _release(self) -> None:
        lines = [f"TABLE {self.size}"]
        lines += [self._endpoints[r].to_line() for r in range(self.size)]
        msg = ("\n".join(lines) + "\n" + self.topology.to_text() + "GO\n").encode()
        self.events.release_time = time.time()
        for r in range(self.size):
            try:
                self._conns[r].sendall(msg)
            except OSError:
                pass
        self.events.releases_sent += 1

    def close(self) -> None:
        for conn in self._conns.values():
            conn.close()
        self._listener.close()
