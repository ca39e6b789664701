import random
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmp import BINOMIAL, MAX, MIN, MULTILEVEL, SUM, JobLayout, SubjobSpec, UsageError, compute_topology
from gridmp.api import WORLD_CONTEXT
from gridmp.collectives import (REDUCE_TAG, binomial_edges, binomial_schedule, build_schedule, count_level_messages,
                                schedule_trace)
from gridmp.local import run_threads
from gridmp.transport import select_method
from strategies import layouts


def doubling_edges(n):
    """Recursive doubling: with block size 2d, the head v of each block sends to v + d, for d = 1, 2, 4, ..."""
    edges, d = set(), 1
    while d < n:
        edges |= {(v, v + d) for v in range(0, n, 2 * d) if v + d < n}
        d *= 2
    return edges


def planned(topo, sched):
    return count_level_messages(schedule_trace(sched, lambda p, c: select_method(topo, p, c)), topo)


def n_sites(topo, members):
    return len({topo.colors[r][1] for r in members})


def assert_tree(sched, members):
    assert len(sched.edges) == len(members) - 1
    assert sched.parent(sched.root) is None
    for r in members:
        hops, cur = 0, r
        while cur != sched.root:
            cur = sched.parent(cur)
            hops += 1
            assert cur is not None and hops <= len(members)


def test_binomial_eight_ranks():
    edges = binomial_edges(list(range(8)))
    assert set(edges) == {(0, 1), (0, 2), (0, 4), (2, 3), (4, 5), (4, 6), (6, 7)}
    assert set(edges) == doubling_edges(8)
    assert binomial_edges([0, 1]) == [(0, 1)]
    assert binomial_edges([5]) == []


@pytest.mark.parametrize("n", range(1, 40))
def test_binomial_matches_doubling(n):
    assert set(binomial_edges(list(range(n)))) == doubling_edges(n)


def test_grid12_schedule_root0(grid12_topo):
    s = build_schedule(grid12_topo, range(12), 0)
    assert s.level_edges(0) == [(0, 4)]
    assert s.level_edges(1) == [(4, 8)]
    assert sorted(s.representatives[0]) == [0, 4]
    assert sorted(s.representatives[1]) == [0, 4, 8]
    # machines without a vendor channel are served at level 2; the vendor machine at level 3
    assert set(s.level_edges(2)) == ({(a + 4, b + 4) for a, b in doubling_edges(4)}
                                     | {(a + 8, b + 8) for a, b in doubling_edges(4)})
    assert set(s.level_edges(3)) == doubling_edges(4)
    assert planned(grid12_topo, s) == {"wide_area": 1, "local_area": 1, "system_area": 6, "vendor": 3}


def test_grid12_schedule_root5(grid12_topo):
    s = build_schedule(grid12_topo, range(12), 5)
    assert sorted(s.representatives[0]) == [0, 5]
    assert s.level_edges(0) == [(5, 0)]
    assert_tree(s, range(12))


def test_single_machine_root2():
    topo = compute_topology(JobLayout([SubjobSpec("A", "M", 4)]))
    s = build_schedule(topo, range(4), 2)
    assert s.level_edges(0) == s.level_edges(1) == []
    order = [2, 3, 0, 1]
    assert set(s.level_edges(2)) == {(order[a], order[b]) for a, b in doubling_edges(4)}


def test_binomial_baseline_wide_area(grid12_topo):
    s = binomial_schedule(range(12), 0)
    counts = planned(grid12_topo, s)
    assert counts["wide_area"] == 2
    wide = [(p, c) for p, c in s.pairs() if grid12_topo.colors[p][1] != grid12_topo.colors[c][1]]
    assert sorted(wide) == [(0, 4), (0, 8)]


def test_unknown_root_and_algorithm(grid12_topo):
    with pytest.raises(UsageError):
        build_schedule(grid12_topo, range(4), 7)


@settings(max_examples=150, deadline=None)
@given(layouts(max_ranks=32, max_subjobs=10), st.data())
def test_schedule_properties(layout, data):
    topo = compute_topology(layout)
    n = topo.world_size
    members = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
    root = data.draw(st.sampled_from(members))
    ml = build_schedule(topo, members, root)
    bn = binomial_schedule(members, root)
    assert_tree(ml, members)
    assert_tree(bn, members)
    wide_ml, wide_bn = planned(topo, ml)["wide_area"], planned(topo, bn)["wide_area"]
    assert wide_ml == n_sites(topo, members) - 1
    assert wide_ml <= wide_bn
    # every cluster has exactly one representative: the root if it is inside, else the smallest rank
    for level in range(1, 4):
        for cluster in ml.clusters.get(level, []):
            chosen = [r for r in ml.representatives.get(level - 1, []) if r in cluster]
            assert chosen == [root if root in cluster else min(cluster)]


def bcast_both(rt, payload, root):
    out = []
    for algo in (MULTILEVEL, BINOMIAL):
        buf = payload.copy() if rt.world.rank == root else np.zeros_like(payload)
        with rt.engine.recording() as log:
            rt.world.bcast(buf, root, algo)
        out.append((buf.tobytes(), list(log)))
    return out


def test_grid12_bcast_run(grid12, grid12_topo):
    payload = np.array([7, 7, 7], np.int32)
    out = run_threads(grid12, lambda rt: bcast_both(rt, payload, 0))
    for (ml, _), (bn, _) in out:
        assert ml == bn == payload.tobytes()
    ml_trace = [m for (_, log), _ in out for m in log]
    bn_trace = [m for _, (_, log) in out for m in log]
    assert count_level_messages(ml_trace, grid12_topo) == {"wide_area": 1, "local_area": 1, "system_area": 6, "vendor": 3}
    assert count_level_messages(bn_trace, grid12_topo)["wide_area"] == 2


@settings(max_examples=25, deadline=None)
@given(layouts(max_ranks=16), st.integers(0, 2**32 - 1))
def test_bcast_algorithms_agree(layout, seed):
    rng = np.random.default_rng(seed)
    n = layout.world_size
    root = int(rng.integers(n))
    payload = rng.integers(-2**40, 2**40, int(rng.integers(0, 300)), dtype=np.int64)
    out = run_threads(layout, lambda rt: bcast_both(rt, payload, root))
    for (ml, log), (bn, blog) in out:
        assert ml == bn == payload.tobytes()
    assert sum(len(log) for (_, log), _ in out) == n - 1
    assert sum(len(log) for _, (_, log) in out) == n - 1


def fold(values, op):
    acc = values[0]
    for v in values[1:]:
        acc = {SUM: np.add, MAX: np.maximum, MIN: np.minimum}[op](acc, v)
    return acc


@pytest.mark.parametrize("algo", [MULTILEVEL, BINOMIAL])
def test_reduce_examples(grid12, algo):
    out = run_threads(grid12, lambda rt: rt.world.reduce(np.array([rt.rank], np.int64), SUM, 0, algo))
    assert out[0].tolist() == [66]
    assert all(o is None for o in out[1:])
    three = JobLayout([SubjobSpec("A", "M", 3)])
    vals = [3, 9, 1]
    out = run_threads(three, lambda rt: rt.world.reduce(np.array([vals[rt.rank]], np.int32), MAX, 1, algo))
    assert out[1].tolist() == [9]


def test_reduce_wide_area_count(grid12, grid12_topo):
    def body(rt):
        with rt.engine.recording() as log:
            rt.world.reduce(np.ones(2, np.float64), SUM, 0)
        return log
    trace = [m for log in run_threads(grid12, body) for m in log]
    assert count_level_messages(trace, grid12_topo)["wide_area"] == 1
    assert len(trace) == 11


def test_reduce_rejects_bytes():
    with pytest.raises(UsageError):
        run_threads(JobLayout([SubjobSpec("A", "M", 2)]), lambda rt: rt.world.reduce(np.zeros(2, np.uint8)))


@settings(max_examples=20, deadline=None)
@given(layouts(max_ranks=16), st.integers(0, 2**32 - 1), st.sampled_from([SUM, MAX, MIN]),
       st.sampled_from(["i4", "i8", "f8"]))
def test_reduce_matches_fold(layout, seed, op, dtype):
    rng = np.random.default_rng(seed)
    n = layout.world_size
    root = int(rng.integers(n))
    if dtype == "f8":
        # positive values keep the sum well conditioned, so order effects stay near machine epsilon
        contrib = [rng.uniform(0.5, 2.0, 5) * 10.0 ** rng.integers(-3, 4) for _ in range(n)]
    else:
        contrib = [rng.integers(-1000, 1000, 5).astype(dtype) for _ in range(n)]
    out = run_threads(layout, lambda rt: rt.world.reduce(contrib[rt.rank], op, root))
    expected = fold(contrib, op)
    if dtype == "f8":
        np.testing.assert_allclose(out[root], expected, rtol=1e-12, atol=0)
    else:
        assert out[root].tolist() == expected.tolist()
    again = run_threads(layout, lambda rt: rt.world.reduce(contrib[rt.rank], op, root))
    assert again[root].tobytes() == out[root].tobytes()


def test_barrier_waits_for_everyone():
    layout = JobLayout([SubjobSpec("A", "SP", 4, True), SubjobSpec("B", "C1", 4), SubjobSpec("B", "C2", 4)])
    delays = [random.Random(r).uniform(0, 0.3) for r in range(12)]

    def body(rt):
        time.sleep(delays[rt.rank])
        entered = time.monotonic()
        rt.world.barrier()
        return entered, time.monotonic()
    out = run_threads(layout, body)
    assert min(e for _, e in out) >= max(s for s, _ in out)


def test_repeated_barriers_and_size_one():
    def body(rt):
        for i in range(100):
            rt.world.barrier(MULTILEVEL if i % 2 else BINOMIAL)
        solo = rt.world.split(rt.rank, 0)
        with rt.engine.recording() as log:
            solo.barrier()
            solo.bcast(np.zeros(3, np.int32), 0)
        return log, [(h.context_id, h.tag) for h, _ in rt.engine.queues.unexpected()]
    out = run_threads(JobLayout([SubjobSpec("A", "M", 3, True), SubjobSpec("B", "N", 3)]), body)
    assert all(log == [] for log, _ in out)
    # peers may already be in the finalize barrier; nothing else may be left over
    assert all(set(left) <= {(WORLD_CONTEXT + 1, REDUCE_TAG)} for _, left in out)


def test_bcast_on_subcommunicator(grid12):
    def body(rt):
        w = rt.world
        odd = w.split(w.rank % 2, 0)
        buf = np.full(4, odd.members[1], np.int64) if odd.rank == 1 else np.zeros(4, np.int64)
        odd.bcast(buf, 1)
        return buf.tolist(), odd.members[1]
    for got, root_world in run_threads(grid12, body):
        assert got == [root_world] * 4
