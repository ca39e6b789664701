"""How many messages cross each network level: multilevel trees vs a plain binomial tree.

Nothing is sent here; the schedules are computed and classified offline.
Run with ``python demos/collective_schedules.py``.
"""
import random

from gridmp import JobLayout, SubjobSpec, compute_topology
from gridmp.collectives import binomial_schedule, build_schedule, count_level_messages, schedule_trace
from gridmp.transport import select_method


def level_counts(topo, sched):
    trace = schedule_trace(sched, lambda p, c: select_method(topo, p, c))
    return count_level_messages(trace, topo)


layout = JobLayout([
    SubjobSpec("A", "SP", 4, vendor=True),
    SubjobSpec("B", "C1", 4),
    SubjobSpec("B", "C2", 4),
])
topo = compute_topology(layout)

for root in (0, 5):
    ml = build_schedule(topo, range(topo.world_size), root)
    bn = binomial_schedule(range(topo.world_size), root)
    print(f"root {root}")
    print("  multilevel", level_counts(topo, ml))
    print("  binomial  ", level_counts(topo, bn))
    print("  wide-area edges:", ml.level_edges(0), "site representatives:", ml.representatives[0])

# On bigger random layouts the multilevel tree always needs sites-1 wide-area messages.
rng = random.Random(1)
for trial in range(5):
    specs = [SubjobSpec(f"S{s}", f"S{s}M{m}", rng.randint(1, 6), rng.random() < 0.5)
             for s in range(rng.randint(2, 4)) for m in range(rng.randint(1, 3))]
    t = compute_topology(JobLayout(specs))
    root = rng.randrange(t.world_size)
    ml = level_counts(t, build_schedule(t, range(t.world_size), root))
    bn = level_counts(t, binomial_schedule(range(t.world_size), root))
    sites = len({c[1] for c in t.colors})
    print(f"{t.world_size:3d} ranks, {sites} sites: wide-area multilevel={ml['wide_area']} binomial={bn['wide_area']}")
