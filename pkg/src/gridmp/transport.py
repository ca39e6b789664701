"""Vendor (same-machine IPC) and TCP channels between processes.

One bidirectional channel per process pair and method. Channels are created
lazily on first send; when two processes connect to each other at the same
time, the connection initiated by the lower world rank is kept.
"""
from __future__ import annotations

import enum
import os
import selectors
import socket
import struct
import tempfile
import time
from dataclasses import dataclass

from .errors import ProtocolError, TransportError, UsageError
from .topology import VENDOR, TopologyMap
from .wire import HEADER_SIZE, WireHeader, convert_payload

HANDSHAKE = struct.Struct(">4siiI")  # b"GMPH", initiator rank, target rank, serial
HELLO = b"GMPH"
ACK = b"GACK"
REJ = b"GREJ"
RECV_CHUNK = 256 * 1024


class Method(enum.Enum):
    VENDOR = "vendor"
    TCP = "tcp"


def select_method(topo: TopologyMap, me: int, peer: int) -> Method:
    topo.check_rank(me)
    topo.check_rank(peer)
    if topo.depths[me] > VENDOR and topo.depths[peer] > VENDOR:
        if topo.colors[me][VENDOR] == topo.colors[peer][VENDOR]:
            return Method.VENDOR
    return Method.TCP


def vendor_socket_path(vendor_key: str, rank: int) -> str:
    return os.path.join(tempfile.gettempdir(), f"gridmp-{vendor_key}-{rank}.sock")


@dataclass(frozen=True)
class Endpoint:
    rank: int
    host: str
    port: int
    vendor_key: str | None = None

    def to_line(self) -> str:
        fields = [str(self.rank), f"{self.host}:{self.port}"]
        if self.vendor_key:
            fields.append(self.vendor_key)
        return " ".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "Endpoint":
        fields = line.split()
        if len(fields) not in (2, 3):
            raise ValueError(f"malformed endpoint line {line!r}")
        host, _, port = fields[1].rpartition(":")
        return cls(int(fields[0]), host, int(port), fields[2] if len(fields) == 3 else None)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed during handshake")
        buf += chunk
    return bytes(buf)


class Channel:
    """A framed, bidirectional byte stream to one peer.

    The socket stays in blocking mode; non-blocking operations pass
    ``MSG_DONTWAIT`` so a blocking receive needs no mode switch.
    """

    def __init__(self, sock: socket.socket, peer: int, method: Method, ident: tuple[int, int, int]):
        self.sock = sock
        self.peer = peer
        self.method = method
        self.ident = ident
        self.messages_sent = 0
        self.write_ops = 0
        self.bytes_sent = 0
        self.messages_received = 0
        self.eof = False
        self.poisoned: Exception | None = None
        self._inbuf = bytearray()
        self._scratch = bytearray(RECV_CHUNK)
        self._scratch_view = memoryview(self._scratch)

    def __repr__(self) -> str:
        return f"Channel(peer={self.peer}, method={self.method.value}, ident={self.ident})"

    def fileno(self) -> int:
        return self.sock.fileno()

    def send_message(self, hdr: WireHeader, payload=b"", on_block=None) -> None:
        """Send header and payload as one gathered write.

        ``on_block(channel)`` is called whenever the socket buffer is full so the
        caller can keep draining incoming traffic.
        """
        if self.poisoned is not None:
            raise TransportError(f"channel unusable: {self.poisoned}", self.peer)
        body = memoryview(payload).cast("B")
        if hdr.payload_len != body.nbytes:
            raise UsageError(f"header says {hdr.payload_len} bytes, payload has {body.nbytes}")
        parts = [memoryview(hdr.pack()), body]
        total = HEADER_SIZE + body.nbytes
        sent = 0
        while True:
            try:
                n = self.sock.sendmsg(parts, [], socket.MSG_DONTWAIT)
            except BlockingIOError:
                n = 0
            except OSError as exc:
                self.poisoned = exc
                raise TransportError(f"send failed: {exc}", self.peer) from exc
            sent += n
            if sent == total:
                break
            while parts and n >= parts[0].nbytes:
                n -= parts[0].nbytes
                parts.pop(0)
            parts[0] = parts[0][n:]
            if on_block is not None:
                on_block(self)
            else:
                selectors_wait_writable(self.sock)
        self.messages_sent += 1
        self.write_ops += 1
        self.bytes_sent += total

    def fill(self, block: bool = False) -> bool:
        """Read whatever is available into the input buffer; True if bytes arrived."""
        if self.eof or self.poisoned is not None:
            return False
        try:
            n = self.sock.recv_into(self._scratch, RECV_CHUNK, 0 if block else socket.MSG_DONTWAIT)
        except BlockingIOError:
            return False
        except OSError as exc:
            self.poisoned = exc
            raise TransportError(f"receive failed: {exc}", self.peer) from exc
        if n == 0:
            self.eof = True
            if self._inbuf:
                self.poisoned = TransportError("stream truncated mid-message", self.peer)
                raise self.poisoned
            return False
        self._inbuf += self._scratch_view[:n]
        return True

    def frames(self):
        """Yield complete ``(header, payload)`` messages from the input buffer."""
        buf = self._inbuf
        while len(buf) >= HEADER_SIZE:
            try:
                hdr = WireHeader.unpack(buf)
            except ProtocolError as exc:
                self.poisoned = exc
                raise ProtocolError(str(exc), self.peer) from None
            end = HEADER_SIZE + hdr.payload_len
            if len(buf) < end:
                return
            payload = bytes(buf[HEADER_SIZE:end])
            del buf[:end]
            self.messages_received += 1
            yield hdr, convert_payload(hdr, payload)

    def recv_message(self) -> tuple[WireHeader, bytes]:
        """Block until the next complete message on this channel arrives."""
        while True:
            for frame in self.frames():
                return frame
            if self.eof:
                raise TransportError("channel closed by peer", self.peer)
            self.fill(block=True)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def selectors_wait_writable(sock: socket.socket, timeout: float = 0.05) -> None:
    with selectors.DefaultSelector() as sel:
        sel.register(sock, selectors.EVENT_WRITE)
        sel.select(timeout)


class Transport:
    """Listeners, channel registry and per-method readiness polling for one process."""

    def __init__(self, me: int, bind_host: str = "127.0.0.1", vendor_key: str | None = None,
                 connect_timeout: float | None = None):
        self.me = me
        self.vendor_key = vendor_key
        self.connect_timeout = connect_timeout
        self.endpoints: dict[int, Endpoint] = {}
        self.channels: dict[tuple[int, Method], Channel] = {}
        self._pending: set[tuple[int, Method]] = set()
        self._serial = 0
        self._selectors = {m: selectors.DefaultSelector() for m in Method}
        self._listeners: dict[Method, socket.socket] = {}

        tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        tcp.bind((bind_host, 0))
        tcp.listen(256)
        self._listeners[Method.TCP] = tcp
        self._vendor_path = None
        if vendor_key:
            path = vendor_socket_path(vendor_key, me)
            if os.path.exists(path):
                os.unlink(path)
            uds = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            uds.bind(path)
            uds.listen(256)
            self._vendor_path = path
            self._listeners[Method.VENDOR] = uds
        for method, lsock in self._listeners.items():
            self._selectors[method].register(lsock, selectors.EVENT_READ, None)

    @property
    def endpoint(self) -> Endpoint:
        host, port = self._listeners[Method.TCP].getsockname()[:2]
        return Endpoint(self.me, host, port, self.vendor_key)

    def has_vendor(self) -> bool:
        return Method.VENDOR in self._listeners

    def channel(self, peer: int, method: Method) -> Channel:
        ch = self.channels.get((peer, method))
        if ch is None:
            ch = self.connect(peer, method)
        return ch

    def connect(self, peer: int, method: Method) -> Channel:
        key = (peer, method)
        if key in self.channels:
            return self.channels[key]
        ep = self.endpoints.get(peer)
        if ep is None:
            raise UsageError(f"no endpoint known for rank {peer}")
        try:
            if method is Method.VENDOR:
                if not ep.vendor_key or ep.vendor_key != self.vendor_key:
                    raise UsageError(f"vendor channel to rank {peer} requires a shared vendor key")
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.connect(vendor_socket_path(ep.vendor_key, peer))
            else:
                sock = socket.create_connection((ep.host, ep.port))
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._serial += 1
            serial = self._serial
            sock.sendall(HANDSHAKE.pack(HELLO, self.me, peer, serial))
        except OSError as exc:
            raise TransportError(f"cannot connect over {method.value}: {exc}", peer) from exc

        self._pending.add(key)
        deadline = None if self.connect_timeout is None else time.monotonic() + self.connect_timeout
        listener = self._listeners[method]
        try:
            with selectors.DefaultSelector() as sel:
                sel.register(sock, selectors.EVENT_READ, "reply")
                sel.register(listener, selectors.EVENT_READ, "listen")
                reply = None
                while reply is None:
                    if deadline is not None and time.monotonic() > deadline:
                        raise TransportError("handshake timed out", peer)
                    for skey, _ in sel.select(0.1):
                        if skey.data == "listen":
                            self._accept(method)
                        elif reply is None:
                            reply = _recv_exact(sock, 4)
        except (OSError, ConnectionError) as exc:
            sock.close()
            raise TransportError(f"handshake failed: {exc}", peer) from exc
        finally:
            self._pending.discard(key)

        if reply == ACK:
            ch = Channel(sock, peer, method, (self.me, peer, serial))
            self._register(ch)
            return ch
        sock.close()
        if reply != REJ:
            raise ProtocolError(f"unexpected handshake reply {reply!r}", peer)
        # The peer's own connection won the race; wait for it to be accepted.
        while key not in self.channels:
            if deadline is not None and time.monotonic() > deadline:
                raise TransportError("handshake timed out", peer)
            if listener in (k.fileobj for k, _ in self._selectors[method].select(0.1)):
                self._accept(method)
        return self.channels[key]

    def _accept(self, method: Method) -> None:
        conn, _ = self._listeners[method].accept()
        try:
            conn.settimeout(10.0)
            magic, initiator, target, serial = HANDSHAKE.unpack(_recv_exact(conn, HANDSHAKE.size))
            if magic != HELLO or target != self.me:
                conn.close()
                return
            key = (initiator, method)
            if key in self.channels or (key in self._pending and self.me < initiator):
                conn.sendall(REJ)
                conn.close()
                return
            conn.sendall(ACK)
            conn.settimeout(None)
        except (OSError, ConnectionError, struct.error):
            conn.close()
            return
        if method is Method.TCP:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._register(Channel(conn, initiator, method, (initiator, self.me, serial)))

    def _register(self, ch: Channel) -> None:
        self.channels[(ch.peer, ch.method)] = ch
        self._selectors[ch.method].register(ch.sock, selectors.EVENT_READ, ch)

    def forget(self, ch: Channel) -> None:
        """Stop polling a channel whose peer has closed it."""
        try:
            self._selectors[ch.method].unregister(ch.sock)
        except (KeyError, ValueError):
            pass

    def poll(self, method: Method, timeout: float | None) -> list[Channel]:
        """Accept pending connections and return channels with data waiting."""
        ready = []
        for key, _ in self._selectors[method].select(timeout):
            if key.data is None:
                self._accept(method)
            else:
                ready.append(key.data)
        return ready

    def registry(self) -> list[dict]:
        return [
            {"peer": peer, "method": method.value, "ident": list(ch.ident)}
            for (peer, method), ch in sorted(self.channels.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        ]

    def close(self) -> None:
        for ch in self.channels.values():
            ch.close()
        self.channels.clear()
        for sel in self._selectors.values():
            sel.close()
        for lsock in self._listeners.values():
            lsock.close()
        if self._vendor_path and os.path.exists(self._vendor_path):
            os.unlink(self._vendor_path)
