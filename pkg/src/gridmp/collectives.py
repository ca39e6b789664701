"""Topology-aware broadcast, reduce and barrier.

The multilevel schedule builds one binomial tree per hierarchy level: among
site representatives over the wide area, among machine representatives inside
each site, among vendor clusters and lone TCP ranks inside each machine, and
finally among the members of each vendor cluster. A cluster's representative
is the operation root if the root belongs to it, otherwise its smallest world
rank. Traffic is thereby confined to the cheapest level that can carry it.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError
from .topology import LEVEL_NAMES, LOCAL_AREA, SYSTEM_AREA, VENDOR, TopologyMap, clusters_at_level
from .transport import Method

MULTILEVEL = "multilevel"
BINOMIAL = "binomial"
ALGORITHMS = (MULTILEVEL, BINOMIAL)

BCAST_TAG = 1
REDUCE_TAG = 2

SUM, MAX, MIN = "sum", "max", "min"
_UFUNCS = {SUM: np.add, MAX: np.maximum, MIN: np.minimum}


def default_algorithm() -> str:
    algo = os.environ.get("GRIDMP_COLL", MULTILEVEL)
    if algo not in ALGORITHMS:
        raise UsageError(f"GRIDMP_COLL must be one of {ALGORITHMS}, got {algo!r}")
    return algo


def binomial_edges(participants: Sequence[int]) -> list[tuple[int, int]]:
    """Binomial tree over ``participants`` rooted at ``participants[0]``.

    Edges are ``(parent, child)`` in send order: every parent sends to its
    largest subtree first.
    """
    n = len(participants)
    edges = []
    for v in range(n):
        low = v & -v if v else 1 << max(n - 1, 0).bit_length()
        mask = low >> 1
        while mask:
            if v + mask < n:
                edges.append((participants[v], participants[v + mask]))
            mask >>= 1
    return edges


def _rooted(ranks: Sequence[int], root: int) -> list[int]:
    ordered = sorted(ranks)
    i = ordered.index(root)
    return ordered[i:] + ordered[:i]


@dataclass
class TreeSchedule:
    root: int
    edges: list[tuple[int, int, int | None]] = field(default_factory=list)  # (parent, child, level)

    def parent(self, rank: int) -> int | None:
        for p, c, _ in self.edges:
            if c == rank:
                return p
        return None

    def children(self, rank: int) -> list[int]:
        """Children of ``rank`` in send order (outer levels first)."""
        return [c for p, c, _ in self.edges if p == rank]

    def pairs(self) -> list[tuple[int, int]]:
        return [(p, c) for p, c, _ in self.edges]


@dataclass
class LevelSchedule(TreeSchedule):
    clusters: dict[int, list[list[int]]] = field(default_factory=dict)
    representatives: dict[int, list[int]] = field(default_factory=dict)

    def level_edges(self, level: int) -> list[tuple[int, int]]:
        return [(p, c) for p, c, lv in self.edges if lv == level]

    def edge_method(self, level: int) -> Method:
        return Method.VENDOR if level == VENDOR else Method.TCP


def build_schedule(topo: TopologyMap, members: Iterable[int], root: int) -> LevelSchedule:
    """Multilevel schedule over the world ranks ``members`` rooted at world rank ``root``."""
    members = sorted(members)
    if root not in members:
        raise UsageError(f"root {root} is not a member")
    sched = LevelSchedule(root)

    def descend(group: list[int], rep: int, level: int) -> None:
        if level < VENDOR:
            found, loose = clusters_at_level(topo, level + 1, group)
            subs = sorted(found + [[r] for r in loose], key=lambda c: c[0])
        else:
            subs = [[r] for r in group]
        reps = [rep if rep in c else c[0] for c in subs]
        sched.clusters.setdefault(level + 1, []).extend(subs)
        sched.representatives.setdefault(level, []).extend(reps)
        for parent, child in binomial_edges(_rooted(reps, rep)):
            sched.edges.append((parent, child, level))
        if level < VENDOR:
            for c, r in zip(subs, reps):
                if len(c) > 1:
                    descend(c, r, level + 1)

    descend(members, root, 0)
    # Outer levels first so a rank forwards across the wide area before going local.
    sched.edges.sort(key=lambda e: e[2])
    return sched


def binomial_schedule(members: Sequence[int], root: int) -> TreeSchedule:
    """Topology-unaware binomial tree over communicator order, relabeled so ``root`` is 0."""
    members = list(members)
    i = members.index(root)
    order = members[i:] + members[:i]
    return TreeSchedule(root, [(p, c, None) for p, c in binomial_edges(order)])


def schedule_for(algorithm: str, topo: TopologyMap, members: Sequence[int], root: int) -> TreeSchedule:
    if algorithm == MULTILEVEL:
        return build_schedule(topo, members, root)
    if algorithm == BINOMIAL:
        return binomial_schedule(members, root)
    raise UsageError(f"unknown collective algorithm {algorithm!r}")


def classify_message(topo: TopologyMap, src: int, dst: int, method: Method) -> str:
    if topo.colors[src][LOCAL_AREA] != topo.colors[dst][LOCAL_AREA]:
        return "wide_area"
    if topo.colors[src][SYSTEM_AREA] != topo.colors[dst][SYSTEM_AREA]:
        return "local_area"
    return "vendor" if method is Method.VENDOR else "system_area"


def count_level_messages(trace: Iterable[tuple], topo: TopologyMap) -> dict[str, int]:
    """Count ``(source, dest, method)`` messages by the deepest level the endpoints share."""
    counts = dict.fromkeys(LEVEL_NAMES, 0)
    for src, dst, method in trace:
        counts[classify_message(topo, src, dst, Method(method))] += 1
    return counts


def schedule_trace(sched: TreeSchedule, method_of) -> list[tuple[int, int, Method]]:
    """Messages a tree collective would send, without running it."""
    return [(p, c, method_of(p, c)) for p, c in sched.pairs()]


# Running collectives over a communicator. ``comm`` is an api.Communicator.

def _schedule(comm, root: int, algorithm: str | None) -> TreeSchedule:
    algorithm = algorithm or comm.default_collective
    return schedule_for(algorithm, comm.runtime.topology, comm.members, comm.members[root])


def bcast(comm, buf, root: int = 0, algorithm: str | None = None):
    """Broadcast ``buf`` in place from communicator rank ``root``."""
    comm._check_rank(root)
    if comm.size == 1:
        return buf
    sched = _schedule(comm, root, algorithm)
    me = comm.runtime.rank
    parent = sched.parent(me)
    if parent is not None:
        comm._raw_recv(buf, parent, BCAST_TAG)
    for child in sched.children(me):
        comm._raw_send(buf, child, BCAST_TAG)
    return buf


def bcast_multilevel(comm, buf, root: int = 0):
    return bcast(comm, buf, root, MULTILEVEL)


def bcast_binomial(comm, buf, root: int = 0):
    return bcast(comm, buf, root, BINOMIAL)


def reduce(comm, buf, op: str = SUM, root: int = 0, algorithm: str | None = None):
    """Element-wise reduction to communicator rank ``root``.

    Every combine step folds contributions in ascending world rank, so the
    result is reproducible for a given layout. Returns the result at the root
    and None elsewhere.
    """
    comm._check_rank(root)
    if op not in _UFUNCS:
        raise UsageError(f"unknown reduction op {op!r}")
    data = np.asarray(buf)
    if data.dtype.kind not in "if" or data.dtype.itemsize not in (4, 8) or data.dtype == np.float32:
        raise UsageError(f"reduction needs int32, int64 or float64 data, got {data.dtype}")
    ufunc = _UFUNCS[op]
    me = comm.runtime.rank
    parts = {me: np.array(data, copy=True)}
    if comm.size > 1:
        sched = _schedule(comm, root, algorithm)
        for child in reversed(sched.children(me)):
            incoming = np.empty_like(data)
            comm._raw_recv(incoming, child, REDUCE_TAG)
            parts[child] = incoming
    ranks = sorted(parts)
    acc = parts[ranks[0]]
    for r in ranks[1:]:
        acc = ufunc(acc, parts[r])
    if comm.size > 1:
        parent = sched.parent(me)
        if parent is not None:
            comm._raw_send(acc, parent, REDUCE_TAG)
            return None
    return acc


def reduce_multilevel(comm, buf, op: str = SUM, root: int = 0):
    return reduce(comm, buf, op, root, MULTILEVEL)


def barrier(comm, algorithm: str | None = None) -> None:
    """Reduce an empty token to rank 0, then broadcast it back."""
    if comm.size == 1:
        return
    token = np.zeros(0, dtype=np.int32)
    reduce(comm, token, SUM, 0, algorithm)
    bcast(comm, token, 0, algorithm)
