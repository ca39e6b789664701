"""``gridbench``: ping-pong, receive-category and broadcast benchmarks.

Run it as the executable of a gridrun job; rank 0 writes the CSV::

    subjob site=A machine=M count=2 vendor=true exe=gridbench -- pingpong --sizes 0,8,1024 --reps 1000

CSV columns per scenario:

pingpong
    method,size,latency_us,bandwidth_MBps,reps,low_confidence
category
    category,latency_us,reps,tcp_polls,vendor_probes
bcast
    algo,size,time_us,wide_area_msgs,local_area_msgs,system_area_msgs,vendor_msgs

Latencies are half the median round trip; the first ``min(100, reps // 10)``
iterations are discarded as warm-up. The category scenario interleaves its
three receive kinds over five rounds, with warm-up applied per round.
"""
from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from typing import Sequence

import numpy as np

from . import api
from .collectives import ALGORITHMS, MAX, SUM, count_level_messages
from .errors import UsageError
from .progress import ANY_SOURCE, Category
from .topology import LEVEL_NAMES
from .transport import Method, select_method

PINGPONG_COLUMNS = ["method", "size", "latency_us", "bandwidth_MBps", "reps", "low_confidence"]
CATEGORY_COLUMNS = ["category", "latency_us", "reps", "tcp_polls", "vendor_probes"]
BCAST_COLUMNS = ["algo", "size", "time_us"] + [f"{name}_msgs" for name in LEVEL_NAMES]

LOW_CONFIDENCE_REPS = 10
CATEGORY_ROUNDS = 5
PING_TAG = 11
PENDING_TAG = 12


def warmup_count(reps: int) -> int:
    return min(100, reps // 10)


def _pingpong_times(world, peer: int, size: int, reps: int, source: int | None = None) -> list[float]:
    """Round-trip times in seconds measured at the initiating side (rank 0)."""
    buf = np.zeros(size, dtype=np.uint8)
    src = peer if source is None else source
    times = []
    initiator = world.rank == 0
    for _ in range(warmup_count(reps) + reps):
        if initiator:
            t0 = time.perf_counter()
            world.send(buf, peer, PING_TAG)
            world.recv(buf, src, PING_TAG)
            times.append(time.perf_counter() - t0)
        else:
            world.recv(buf, src, PING_TAG)
            world.send(buf, peer, PING_TAG)
    return times[warmup_count(reps):]


def _sync_pair(world, peer: int) -> None:
    token = np.zeros(0, dtype=np.uint8)
    if world.rank == 0:
        world.send(token, peer, PING_TAG)
        world.recv(token, peer, PING_TAG)
    else:
        world.recv(token, peer, PING_TAG)
        world.send(token, peer, PING_TAG)


def pingpong(rt: api.Runtime, sizes: Sequence[int], reps: int, methods: Sequence[Method] | None = None) -> list[dict]:
    """Ping-pong between ranks 0 and 1 over each available method."""
    world = rt.world
    if world.size != 2:
        raise UsageError(f"pingpong needs exactly 2 ranks, got {world.size}")
    if reps < 1 or any(s < 0 for s in sizes):
        raise UsageError("reps must be >= 1 and sizes >= 0")
    peer = 1 - world.rank
    natural = rt.engine.method_to(peer)
    if methods is None:
        methods = [Method.VENDOR, Method.TCP] if natural is Method.VENDOR else [Method.TCP]
    rows = []
    for method in methods:
        if method is Method.VENDOR and natural is not Method.VENDOR:
            raise UsageError("vendor method requires both ranks in one vendor-capable subjob")
        rt.engine.force_tcp = method is Method.TCP
        _sync_pair(world, peer)
        for size in sizes:
            times = _pingpong_times(world, peer, size, reps)
            if world.rank == 0:
                latency_us = statistics.median(times) / 2 * 1e6
                rows.append({
                    "method": method.value,
                    "size": size,
                    "latency_us": round(latency_us, 3),
                    "bandwidth_MBps": round(size / latency_us, 3) if size else 0.0,
                    "reps": reps,
                    "low_confidence": int(reps < LOW_CONFIDENCE_REPS),
                })
    rt.engine.force_tcp = False
    return rows


def category_bench(rt: api.Runtime, reps: int, rounds: int = CATEGORY_ROUNDS) -> list[dict]:
    """Latency of a vendor-pair ping-pong under the three receive categories.

    Ranks 0 and 1 must share a vendor cluster and the world must contain at
    least one TCP-only peer so the wildcard receive is a multimethod one.
    Other ranks only take part in the final barrier. The categories are
    interleaved over ``rounds`` segments so slow drift in machine load hits
    all of them alike.
    """
    world = rt.world
    if world.size < 3:
        raise UsageError("category benchmark needs ranks 0 and 1 on a vendor channel plus a TCP peer")
    engine = rt.engine
    topo = rt.topology
    if select_method(topo, 0, 1) is not Method.VENDOR:
        raise UsageError("ranks 0 and 1 must communicate over the vendor method")
    if all(select_method(topo, 0, r) is Method.VENDOR for r in range(2, world.size)):
        raise UsageError("world has no TCP peer; a multimethod receive cannot be constructed")
    if world.rank >= 2:
        return []
    peer = 1 - world.rank
    token = np.zeros(1, dtype=np.uint8)
    categories = (Category.SPECIFIED, Category.SPECIFIED_PENDING, Category.MULTIMETHOD)
    times: dict[Category, list[float]] = {c: [] for c in categories}
    polls = {c: [0, 0] for c in categories}
    rounds = max(1, min(rounds, reps))
    for i in range(rounds):
        segment = reps // rounds + (i < reps % rounds)
        for category in categories:
            _sync_pair(world, peer)
            pending = None
            if category is Category.SPECIFIED_PENDING:
                pending = world.irecv(token, peer, PENDING_TAG)
            engine.counters.reset()
            source = ANY_SOURCE if category is Category.MULTIMETHOD else None
            times[category] += _pingpong_times(world, peer, 0, segment, source)
            polls[category][0] += engine.counters.tcp_polls
            polls[category][1] += engine.counters.vendor_probes
            seen = set(engine.counters.categories)
            if seen != {category}:
                raise RuntimeError(f"expected only {category.value} receives, engine saw {sorted(c.value for c in seen)}")
            if pending is not None:
                world.send(token, peer, PENDING_TAG)
                pending.wait()
    if world.rank != 0:
        return []
    return [{
        "category": c.value,
        "latency_us": round(statistics.median(times[c]) / 2 * 1e6, 3),
        "reps": reps,
        "tcp_polls": polls[c][0],
        "vendor_probes": polls[c][1],
    } for c in categories]


def bcast_bench(rt: api.Runtime, algos: Sequence[str], sizes: Sequence[int], reps: int, root: int = 0) -> list[dict]:
    world = rt.world
    for algo in algos:
        if algo not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
    rows = []
    for algo in algos:
        for size in sizes:
            buf = np.zeros(size, dtype=np.uint8)
            world.barrier()
            with rt.engine.recording() as log:
                world.bcast(buf, root, algo)
            counts = count_level_messages(log, rt.topology)
            elapsed = np.zeros(reps, dtype=np.float64)
            for i in range(reps):
                world.barrier()
                t0 = time.perf_counter()
                world.bcast(buf, root, algo)
                elapsed[i] = time.perf_counter() - t0
            slowest = world.reduce(elapsed, MAX, 0)
            totals = world.reduce(np.array([counts[n] for n in LEVEL_NAMES], dtype=np.int64), SUM, 0)
            if world.rank == 0:
                row = {"algo": algo, "size": size, "time_us": round(float(np.median(slowest)) * 1e6, 3)}
                row.update({f"{n}_msgs": int(v) for n, v in zip(LEVEL_NAMES, totals)})
                rows.append(row)
    return rows


def write_csv(rows: list[dict], columns: list[str], path: str | None) -> None:
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path:
            out.close()


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes or any(s < 0 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be non-negative integers")
    return sizes


def _reps(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("reps must be at least 1")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gridbench", description="gridmp microbenchmarks (run under gridrun)")
    parser.add_argument("scenario", choices=["pingpong", "category", "bcast"])
    parser.add_argument("--sizes", type=_sizes, default=None, help="comma-separated message sizes in bytes")
    parser.add_argument("--reps", type=_reps, default=1000)
    parser.add_argument("--algo", choices=ALGORITHMS, help="bcast algorithm (default: both)")
    parser.add_argument("--root", type=int, default=0, help="bcast root rank")
    parser.add_argument("--csv", help="output path (default: stdout of rank 0)")
    args = parser.parse_args(argv)

    rt = api.init()
    try:
        if args.scenario == "pingpong":
            rows = pingpong(rt, args.sizes or [0, 8, 1024, 65536, 1 << 20], args.reps)
            columns = PINGPONG_COLUMNS
        elif args.scenario == "category":
            rows = category_bench(rt, args.reps)
            columns = CATEGORY_COLUMNS
        else:
            algos = [args.algo] if args.algo else list(ALGORITHMS)
            rows = bcast_bench(rt, algos, args.sizes or [8, 65536], args.reps, args.root)
            columns = BCAST_COLUMNS
    except UsageError as exc:
        print(f"gridbench: {exc}", file=sys.stderr)
        rt.transport.close()
        return 2
    rt.finalize()
    if rt.rank == 0:
        write_csv(rows, columns, args.csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
