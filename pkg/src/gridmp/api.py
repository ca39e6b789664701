"""Application-facing runtime: init/finalize, point-to-point, communicators.

Typical use::

    import gridmp

    rt = gridmp.init()
    world = rt.world
    depths, _ = world.attr_get(gridmp.TOPOLOGY_DEPTHS)
    colors, _ = world.attr_get(gridmp.TOPOLOGY_COLORS)
    lan = world.split(colors[world.rank][1])
    rt.finalize()
"""
from __future__ import annotations

import os
import time

import numpy as np

from . import collectives
from .bootstrap import register
from .errors import StartupError, UsageError
from .progress import ANY_SOURCE, ANY_TAG, Engine, Request, Status, as_bytes_view
from .topology import JobLayout, SubjobSpec, TopologyMap, compute_topology
from .transport import Transport
from .wire import DTYPE_BY_CODE

TOPOLOGY_DEPTHS = "TOPOLOGY_DEPTHS"
TOPOLOGY_COLORS = "TOPOLOGY_COLORS"


class _Undefined:
    def __repr__(self) -> str:
        return "UNDEFINED"


UNDEFINED = _Undefined()

SPLIT_TAG = 3
WORLD_CONTEXT = 0


class Communicator:
    """An ordered group of world ranks with its own matching context.

    ``context_id`` carries point-to-point traffic; ``context_id + 1`` carries
    the library's internal collective traffic.
    """

    def __init__(self, runtime: "Runtime", context_id: int, members: tuple[int, ...]):
        self.runtime = runtime
        self.context_id = context_id
        self.members = tuple(members)
        self.rank = self.members.index(runtime.rank)
        self.size = len(self.members)
        self.default_collective = collectives.default_algorithm()
        view = runtime.topology.restrict(self.members)
        self._attrs = {TOPOLOGY_DEPTHS: view.depths, TOPOLOGY_COLORS: view.colors}
        self._freed = False
        self._index = {w: i for i, w in enumerate(self.members)}

    def __repr__(self) -> str:
        return f"Communicator(context={self.context_id}, rank={self.rank}, size={self.size})"

    def _live(self) -> None:
        if self._freed:
            raise UsageError("communicator used after free")

    def _check_rank(self, r: int) -> None:
        if not 0 <= r < self.size:
            raise UsageError(f"rank {r} out of range for communicator of size {self.size}")

    def _world(self, r: int) -> int:
        if r == ANY_SOURCE:
            return ANY_SOURCE
        self._check_rank(r)
        return self.members[r]

    def _status(self, st: Status) -> Status:
        return Status(self._index.get(st.source, st.source), st.tag, st.count, st.nbytes)

    # point-to-point

    def send(self, buf, dest: int, tag: int = 0) -> None:
        self._live()
        view, code = as_bytes_view(buf)
        self.runtime.engine.send(self._world(dest), self.context_id, tag, view, code)

    def isend(self, buf, dest: int, tag: int = 0) -> "CommRequest":
        self._live()
        view, code = as_bytes_view(buf)
        req = self.runtime.engine.send(self._world(dest), self.context_id, tag, view, code)
        return CommRequest(self, req)

    def recv(self, buf, source: int = ANY_SOURCE, tag: int = ANY_TAG) -> Status:
        return self.irecv(buf, source, tag).wait()

    def irecv(self, buf, source: int = ANY_SOURCE, tag: int = ANY_TAG) -> "CommRequest":
        self._live()
        view, code = as_bytes_view(buf, writable=True)
        req = Request("recv", self.context_id, tag, self._world(source), self.members, view, code)
        self.runtime.engine.post_recv(req)
        return CommRequest(self, req)

    def iprobe(self, source: int = ANY_SOURCE, tag: int = ANY_TAG) -> Status | None:
        self._live()
        hdr = self.runtime.engine.iprobe(self.context_id, self._world(source), tag, self.members)
        if hdr is None:
            return None
        count = hdr.payload_len // DTYPE_BY_CODE[hdr.dtype_code].itemsize
        return Status(self._index[hdr.source], hdr.tag, count, hdr.payload_len)

    # internal collective traffic, addressed by world rank

    def _raw_send(self, buf, dest_world: int, tag: int) -> None:
        view, code = as_bytes_view(buf)
        self.runtime.engine.send(dest_world, self.context_id + 1, tag, view, code)

    def _raw_recv(self, buf, source_world: int, tag: int) -> Status:
        view, code = as_bytes_view(buf, writable=True)
        return self.runtime.engine.recv(self.context_id + 1, source_world, tag, view, code, self.members)

    # collectives

    def bcast(self, buf, root: int = 0, algorithm: str | None = None):
        self._live()
        return collectives.bcast(self, buf, root, algorithm)

    def reduce(self, buf, op: str = collectives.SUM, root: int = 0, algorithm: str | None = None):
        self._live()
        return collectives.reduce(self, buf, op, root, algorithm)

    def barrier(self, algorithm: str | None = None) -> None:
        self._live()
        collectives.barrier(self, algorithm)

    def _allgather_rows(self, row: np.ndarray) -> np.ndarray:
        """Linear gather to rank 0 then fan-out; used for communicator creation."""
        table = np.empty((self.size, row.size), dtype=row.dtype)
        if self.rank == 0:
            table[0] = row
            for r in range(1, self.size):
                self._raw_recv(table[r], self.members[r], SPLIT_TAG)
            for r in range(1, self.size):
                self._raw_send(table, self.members[r], SPLIT_TAG)
        else:
            self._raw_send(row, self.members[0], SPLIT_TAG)
            self._raw_recv(table, self.members[0], SPLIT_TAG)
        return table

    def split(self, color, key: int = 0) -> "Communicator | None":
        """Partition by ``color``; order each part by ``(key, rank)``.

        Any integer is a valid color, including negatives. Passing UNDEFINED
        takes part in the collective but returns None.
        """
        self._live()
        defined = color is not UNDEFINED
        proposal = self.runtime._context_proposal()
        row = np.array([int(defined), int(color) if defined else 0, int(key), proposal], dtype=np.int64)
        table = self._allgather_rows(row)
        context_id = int(table[:, 3].max())
        if not defined:
            return None
        mine = [r for r in range(self.size) if table[r, 0] and table[r, 1] == int(color)]
        mine.sort(key=lambda r: (table[r, 2], r))
        comm = Communicator(self.runtime, context_id, tuple(self.members[r] for r in mine))
        self.runtime._live_contexts.add(context_id)
        return comm

    def attr_get(self, key):
        """Return ``(value, found)``; values are indexed by communicator rank."""
        self._live()
        if key in self._attrs:
            return self._attrs[key], True
        return None, False

    def free(self) -> None:
        self._live()
        if self.context_id != WORLD_CONTEXT:
            self.runtime._live_contexts.discard(self.context_id)
        self._freed = True


class CommRequest:
    """Handle for a nonblocking operation on a communicator."""

    def __init__(self, comm: Communicator, req: Request):
        self.comm = comm
        self.request = req

    def wait(self) -> Status:
        return self.comm._status(self.comm.runtime.engine.wait(self.request))

    def test(self) -> Status | None:
        st = self.comm.runtime.engine.test(self.request)
        return None if st is None else self.comm._status(st)


class Runtime:
    """Per-process runtime state: transport, progress engine, world communicator."""

    def __init__(self, rank: int, topology: TopologyMap, transport: Transport, release_time: float | None = None):
        self.rank = rank
        self.size = topology.world_size
        self.topology = topology
        self.transport = transport
        self.engine = Engine(rank, topology, transport)
        self.release_time = release_time
        self._live_contexts = {WORLD_CONTEXT}
        self.world = Communicator(self, WORLD_CONTEXT, tuple(range(self.size)))
        self.finalized = False

    def _context_proposal(self) -> int:
        return max(self._live_contexts) + 2

    def finalize(self) -> None:
        if self.finalized:
            return
        try:
            self.world.barrier()
        finally:
            self.transport.close()
            self.finalized = True

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, *exc) -> None:
        if exc[0] is None:
            self.finalize()
        else:
            self.transport.close()
            self.finalized = True


DEFAULT_LAYOUT = JobLayout([SubjobSpec("local", "localhost", 1, vendor=False)])


def init(*, rank: int | None = None, size: int | None = None, bootstrap: str | None = None,
         vendor_key: str | None = None, timeout: float | None = None) -> Runtime:
    """Join the job described by the GRIDMP_* environment (or the arguments).

    Without any bootstrap information a single-process world is created.
    Returns only after the launcher has released the startup barrier.
    """
    env = os.environ
    rank = int(env["GRIDMP_RANK"]) if rank is None and "GRIDMP_RANK" in env else rank
    size = int(env["GRIDMP_SIZE"]) if size is None and "GRIDMP_SIZE" in env else size
    bootstrap = bootstrap or env.get("GRIDMP_BOOTSTRAP")
    vendor_key = vendor_key or env.get("GRIDMP_VENDOR_KEY") or None
    if timeout is None:
        timeout = float(env.get("GRIDMP_TIMEOUT", "60"))
    bind = env.get("GRIDMP_TCP_BIND", "127.0.0.1")
    connect_timeout = float(env["GRIDMP_CONNECT_TIMEOUT"]) if "GRIDMP_CONNECT_TIMEOUT" in env else None

    if rank is None and size is None and bootstrap is None:
        transport = Transport(0, bind)
        topo = compute_topology(DEFAULT_LAYOUT)
        transport.endpoints = {0: transport.endpoint}
        return Runtime(0, topo, transport, time.time())
    if rank is None or size is None or not bootstrap:
        raise StartupError("incomplete bootstrap environment: need GRIDMP_RANK, GRIDMP_SIZE and GRIDMP_BOOTSTRAP")
    if not 0 <= rank < size:
        raise StartupError(f"GRIDMP_RANK={rank} out of range for GRIDMP_SIZE={size}")
    host, _, port = bootstrap.rpartition(":")
    try:
        address = (host, int(port))
    except ValueError:
        raise StartupError(f"malformed GRIDMP_BOOTSTRAP {bootstrap!r}") from None

    transport = Transport(rank, bind, vendor_key, connect_timeout)
    try:
        endpoints, topo, released = register(address, transport.endpoint, timeout)
        if topo.world_size != size:
            raise StartupError(f"rendezvous reports {topo.world_size} ranks, expected {size}")
    except BaseException:
        transport.close()
        raise
    transport.endpoints = endpoints
    return Runtime(rank, topo, transport, released)


# Functional spellings of the communicator methods.

def comm_rank(comm: Communicator) -> int:
    return comm.rank


def comm_size(comm: Communicator) -> int:
    return comm.size


def comm_split(comm: Communicator, color, key: int = 0) -> Communicator | None:
    return comm.split(color, key)


def comm_free(comm: Communicator) -> None:
    comm.free()


def attr_get(comm: Communicator, key):
    return comm.attr_get(key)
