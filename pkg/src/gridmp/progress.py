"""Request matching and the receive-categorizing progress engine.

A blocking receive is classified by what its source and the other outstanding
requests could require:

* ``SPECIFIED``          concrete vendor peer, nothing outstanding: block on that channel
* ``SPECIFIED_PENDING``  vendor traffic only, other requests outstanding: probe vendor in a loop
* ``TCP_ONLY``           TCP traffic only: block on the TCP sockets
* ``MULTIMETHOD``        TCP and vendor both possible: poll both round-robin

TCP sockets are only polled in the last two cases.
"""
from __future__ import annotations

import enum
import os
import sys
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import TransportError, TruncationError, UsageError
from .topology import TopologyMap
from .transport import Channel, Method, Transport, select_method, selectors_wait_writable
from .wire import BYTES, DTYPE_BY_CODE, LOCAL_LITTLE, WireHeader, dtype_code_of

ANY_SOURCE = -1
ANY_TAG = -1

BLOCK_TIMEOUT = 0.5


class Category(enum.Enum):
    SPECIFIED = "specified"
    SPECIFIED_PENDING = "specified_pending"
    MULTIMETHOD = "multimethod"
    TCP_ONLY = "tcp_only"


class State(enum.Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    ERRORED = "errored"


@dataclass(frozen=True)
class Status:
    source: int
    tag: int
    count: int
    nbytes: int


@dataclass(eq=False)
class Request:
    kind: str  # "send" or "recv"
    context_id: int
    tag: int
    peer: int  # dest for sends; source (or ANY_SOURCE) for receives, in world ranks
    members: tuple[int, ...] = ()
    buffer: object = None
    dtype_code: int = BYTES
    state: State = State.PENDING
    status: Status | None = None
    error: Exception | None = None
    freed: bool = False

    def matches(self, hdr: WireHeader) -> bool:
        return (
            hdr.context_id == self.context_id
            and (self.tag == ANY_TAG or self.tag == hdr.tag)
            and (self.peer == ANY_SOURCE or self.peer == hdr.source)
        )


@dataclass(frozen=True)
class PollPolicy:
    methods: frozenset
    blocking: bool


_POLICIES = {
    Category.SPECIFIED: PollPolicy(frozenset({Method.VENDOR}), True),
    Category.SPECIFIED_PENDING: PollPolicy(frozenset({Method.VENDOR}), False),
    Category.TCP_ONLY: PollPolicy(frozenset({Method.TCP}), True),
    Category.MULTIMETHOD: PollPolicy(frozenset({Method.VENDOR, Method.TCP}), False),
}


def poll_policy(category: Category) -> PollPolicy:
    return _POLICIES[category]


def _methods_needed(req: Request, me: int, method_of: Callable[[int], Method]) -> set[Method]:
    if req.peer == ANY_SOURCE:
        return {method_of(m) for m in req.members if m != me}
    if req.peer == me:
        return set()
    return {method_of(req.peer)}


def categorize(req: Request, outstanding: Iterable[Request], topo: TopologyMap, me: int,
               method_of: Callable[[int], Method] | None = None) -> Category:
    if method_of is None:
        def method_of(peer: int) -> Method:
            return select_method(topo, me, peer)

    outstanding = [o for o in outstanding if o is not req]
    if topo.depths[me] <= 3:
        return Category.TCP_ONLY
    mine = _methods_needed(req, me, method_of)
    others: set[Method] = set()
    for o in outstanding:
        others |= _methods_needed(o, me, method_of)

    if req.peer == ANY_SOURCE:
        if Method.TCP in mine or Method.TCP in others:
            return Category.MULTIMETHOD
        return Category.SPECIFIED_PENDING
    own = method_of(req.peer) if req.peer != me else (Method.VENDOR if topo.depths[me] > 3 else Method.TCP)
    if own is Method.VENDOR:
        if not outstanding:
            return Category.SPECIFIED
        if Method.TCP in others:
            return Category.MULTIMETHOD
        return Category.SPECIFIED_PENDING
    if Method.VENDOR in others:
        return Category.MULTIMETHOD
    return Category.TCP_ONLY


class MatchQueues:
    """Posted receives and unexpected messages.

    Unexpected messages are bucketed by ``(context, source, tag)`` with an
    arrival sequence number, so concrete receives pop a bucket head and
    wildcard receives pick the oldest eligible head.
    """

    def __init__(self):
        self.posted: list[Request] = []
        self._buckets: dict[tuple[int, int, int], deque] = {}
        self._seq = 0
        self.unexpected_count = 0

    def arrive(self, hdr: WireHeader, payload: bytes) -> Request | None:
        for i, req in enumerate(self.posted):
            if req.matches(hdr):
                del self.posted[i]
                return req
        self._seq += 1
        self._buckets.setdefault((hdr.context_id, hdr.source, hdr.tag), deque()).append((self._seq, hdr, payload))
        self.unexpected_count += 1
        return None

    def _find(self, ctx: int, source: int, tag: int):
        if source != ANY_SOURCE and tag != ANY_TAG:
            bucket = self._buckets.get((ctx, source, tag))
            return (ctx, source, tag) if bucket else None
        best, best_seq = None, None
        for key, bucket in self._buckets.items():
            if key[0] != ctx or not bucket:
                continue
            if source != ANY_SOURCE and key[1] != source:
                continue
            if tag != ANY_TAG and key[2] != tag:
                continue
            if best_seq is None or bucket[0][0] < best_seq:
                best, best_seq = key, bucket[0][0]
        return best

    def post(self, req: Request) -> tuple[WireHeader, bytes] | None:
        key = self._find(req.context_id, req.peer, req.tag)
        if key is None:
            self.posted.append(req)
            return None
        bucket = self._buckets[key]
        _, hdr, payload = bucket.popleft()
        if not bucket:
            del self._buckets[key]
        self.unexpected_count -= 1
        return hdr, payload

    def probe(self, ctx: int, source: int, tag: int) -> WireHeader | None:
        key = self._find(ctx, source, tag)
        return None if key is None else self._buckets[key][0][1]

    def unexpected(self) -> list[tuple[WireHeader, bytes]]:
        items = [item for bucket in self._buckets.values() for item in bucket]
        return [(hdr, payload) for _, hdr, payload in sorted(items, key=lambda it: it[0])]


@dataclass
class PollCounters:
    vendor_probes: int = 0
    tcp_polls: int = 0
    categories: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.vendor_probes = 0
        self.tcp_polls = 0
        self.categories.clear()


class Engine:
    """Single-threaded progress engine for one process."""

    def __init__(self, me: int, topo: TopologyMap, transport: Transport, trace: bool | None = None):
        self.me = me
        self.topo = topo
        self.transport = transport
        self.queues = MatchQueues()
        self.counters = PollCounters()
        self.force_tcp = False
        self.messages_sent = 0
        self.messages_matched = 0
        self.message_log: list | None = None
        self.trace = os.environ.get("GRIDMP_TRACE") == "1" if trace is None else trace
        self._methods = [select_method(topo, me, p) for p in range(topo.world_size)]

    def method_to(self, peer: int) -> Method:
        if self.force_tcp:
            return Method.TCP
        return self._methods[peer]

    def _trace(self, event: str, peer: int, ctx: int, tag: int, nbytes: int) -> None:
        print(f"gridmp[{self.me}] {event} peer={peer} ctx={ctx} tag={tag} bytes={nbytes}", file=sys.stderr)

    @contextmanager
    def recording(self):
        """Collect ``(source, dest, method)`` for every message sent inside the block."""
        log: list = []
        previous, self.message_log = self.message_log, log
        try:
            yield log
        finally:
            self.message_log = previous

    # sending

    def send(self, dest: int, context_id: int, tag: int, payload, dtype_code: int = BYTES) -> Request:
        if tag < 0:
            raise UsageError(f"send tag must be non-negative, got {tag}")
        self.topo.check_rank(dest)
        body = memoryview(payload).cast("B")
        hdr = WireHeader(self.me, context_id, tag, body.nbytes, dtype_code, LOCAL_LITTLE)
        req = Request("send", context_id, tag, dest, dtype_code=dtype_code)
        if dest == self.me:
            method = Method.VENDOR if self.topo.depths[self.me] > 3 else Method.TCP
            self._incoming(hdr, bytes(body))
        else:
            method = self.method_to(dest)
            ch = self.transport.channel(dest, method)
            ch.send_message(hdr, body, on_block=self._drain_blocked)
        self.messages_sent += 1
        if self.message_log is not None:
            self.message_log.append((self.me, dest, method))
        if self.trace:
            self._trace("send", dest, context_id, tag, body.nbytes)
        req.state = State.COMPLETE
        req.status = Status(dest, tag, body.nbytes // DTYPE_BY_CODE[dtype_code].itemsize, body.nbytes)
        return req

    def _drain_blocked(self, ch: Channel) -> None:
        for ready in self.transport.poll(ch.method, 0):
            self._read(ready, block=False)
        self._count_poll(ch.method)
        selectors_wait_writable(ch.sock, 0.01)

    # receiving

    def post_recv(self, req: Request) -> Request:
        found = self.queues.post(req)
        if found is not None:
            self._complete(req, *found)
        return req

    def outstanding(self) -> list[Request]:
        return list(self.queues.posted)

    def _incoming(self, hdr: WireHeader, payload: bytes) -> None:
        if self.trace:
            self._trace("recv", hdr.source, hdr.context_id, hdr.tag, len(payload))
        req = self.queues.arrive(hdr, payload)
        if req is not None:
            self._complete(req, hdr, payload)

    def _complete(self, req: Request, hdr: WireHeader, payload: bytes) -> None:
        self.messages_matched += 1
        n = len(payload)
        if req.buffer is None:
            itemsize = 1
        else:
            view = memoryview(req.buffer).cast("B")
            itemsize = DTYPE_BY_CODE[req.dtype_code].itemsize
            if n > view.nbytes:
                req.state = State.ERRORED
                req.error = TruncationError(
                    f"message of {n} bytes from rank {hdr.source} exceeds receive buffer of {view.nbytes} bytes"
                )
                return
            view[:n] = payload
        req.status = Status(hdr.source, hdr.tag, n // itemsize, n)
        req.state = State.COMPLETE

    def _read(self, ch: Channel, block: bool) -> None:
        try:
            got = ch.fill(block)
            for hdr, payload in ch.frames():
                self._incoming(hdr, payload)
        except TransportError as exc:
            self.transport.forget(ch)
            self._fail_waiting_on(ch.peer, exc)
            return
        if not got and ch.eof:
            self.transport.forget(ch)
            self._fail_waiting_on(ch.peer, TransportError("peer closed the channel", ch.peer))

    def _fail_waiting_on(self, peer: int, exc: Exception) -> None:
        for req in list(self.queues.posted):
            if req.peer == peer:
                self.queues.posted.remove(req)
                req.state = State.ERRORED
                req.error = exc

    def _count_poll(self, method: Method) -> None:
        if method is Method.VENDOR:
            self.counters.vendor_probes += 1
        else:
            self.counters.tcp_polls += 1

    def _poll(self, method: Method, timeout: float | None) -> bool:
        if method is Method.VENDOR and not self.transport.has_vendor():
            return False
        self._count_poll(method)
        ready = self.transport.poll(method, timeout)
        for ch in ready:
            self._read(ch, block=False)
        return bool(ready)

    def advance(self, category: Category, req: Request | None = None) -> None:
        """Run one progress step with the polling behavior of ``category``."""
        if category is Category.SPECIFIED:
            ch = None
            if req is not None and req.peer not in (ANY_SOURCE, self.me):
                ch = self.transport.channels.get((req.peer, Method.VENDOR))
            if ch is not None and not ch.eof:
                self._count_poll(Method.VENDOR)
                self._read(ch, block=True)
            else:
                self._poll(Method.VENDOR, BLOCK_TIMEOUT)
        elif category is Category.SPECIFIED_PENDING:
            if not self._poll(Method.VENDOR, 0):
                os.sched_yield()
        elif category is Category.TCP_ONLY:
            self._poll(Method.TCP, BLOCK_TIMEOUT)
        else:
            got = self._poll(Method.VENDOR, 0)
            got = self._poll(Method.TCP, 0) or got
            if not got:
                os.sched_yield()

    def categorize(self, req: Request) -> Category:
        return categorize(req, self.queues.posted, self.topo, self.me, self.method_to)

    def wait(self, req: Request) -> Status:
        if req.freed:
            raise UsageError("request was already completed and freed")
        category = None
        while req.state is State.PENDING:
            if category is None:
                category = self.categorize(req)
                self.counters.categories[category] = self.counters.categories.get(category, 0) + 1
            self.advance(category, req)
        req.freed = True
        if req.state is State.ERRORED:
            raise req.error
        return req.status

    def test(self, req: Request) -> Status | None:
        if req.freed:
            raise UsageError("request was already completed and freed")
        if req.state is State.PENDING:
            for method in poll_policy(self.categorize(req)).methods:
                self._poll(method, 0)
        if req.state is State.PENDING:
            return None
        req.freed = True
        if req.state is State.ERRORED:
            raise req.error
        return req.status

    def iprobe(self, context_id: int, source: int, tag: int, members: tuple[int, ...]) -> WireHeader | None:
        hdr = self.queues.probe(context_id, source, tag)
        if hdr is not None:
            return hdr
        probe_req = Request("recv", context_id, tag, source, members)
        for method in poll_policy(self.categorize(probe_req)).methods:
            self._poll(method, 0)
        return self.queues.probe(context_id, source, tag)

    def recv(self, context_id: int, source: int, tag: int, buffer, dtype_code: int,
             members: tuple[int, ...]) -> Status:
        req = Request("recv", context_id, tag, source, members, buffer, dtype_code)
        self.post_recv(req)
        return self.wait(req)


def as_bytes_view(buf, writable: bool = False) -> tuple[memoryview, int]:
    """Contiguous byte view and wire dtype code of an application buffer.

    Non-contiguous arrays are copied for sending; receive buffers must be contiguous.
    """
    code = dtype_code_of(buf)
    if isinstance(buf, np.ndarray) and not buf.flags.c_contiguous:
        if writable:
            raise UsageError("receive buffer must be C-contiguous")
        buf = np.ascontiguousarray(buf)
    return memoryview(buf).cast("B"), code


__all__ = [
    "ANY_SOURCE", "ANY_TAG", "Category", "Engine", "MatchQueues", "PollPolicy",
    "Request", "State", "Status", "as_bytes_view", "categorize", "poll_policy",
]
