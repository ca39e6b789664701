"""A whole job inside one Python process, one thread per rank.

Useful for experimenting without the launcher: every rank still gets real
sockets and goes through the startup barrier. Run with
``python demos/threaded_job.py``.
"""
import numpy as np

import gridmp
from gridmp.local import run_threads

layout = gridmp.JobLayout([
    gridmp.SubjobSpec("A", "SP", 4, vendor=True),
    gridmp.SubjobSpec("B", "C1", 4),
    gridmp.SubjobSpec("B", "C2", 4),
])


def program(rt):
    world = rt.world
    colors, _ = world.attr_get(gridmp.TOPOLOGY_COLORS)
    site = world.split(colors[world.rank][1])

    # broadcast a vector from rank 5, recording which links carried it
    data = np.arange(3, dtype=np.int32) * 7 if world.rank == 5 else np.zeros(3, np.int32)
    with rt.engine.recording() as log:
        world.bcast(data, root=5)

    total = world.reduce(np.array([world.rank], np.int64), gridmp.SUM, root=0)
    site_max = site.reduce(np.array([world.rank], np.int64), gridmp.MAX, root=0)
    return data.tolist(), log, total, site.members, site_max


for rank, (data, log, total, members, site_max) in enumerate(run_threads(layout, program)):
    sends = ", ".join(f"{s}->{d} ({m.value})" for s, d, m in log) or "-"
    extra = f" sum={total[0]}" if total is not None else ""
    extra += f" site max={site_max[0]}" if site_max is not None else ""
    print(f"rank {rank:2d} got {data} site={members} sent: {sends}{extra}")
