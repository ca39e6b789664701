"""Topology tour: depths, colors, clusters and transport choice for a two-site job.

Run with ``python demos/topology_tour.py``.
"""
from gridmp import JobLayout, SubjobSpec, compute_topology
from gridmp.topology import LEVEL_NAMES, clusters_at_level
from gridmp.transport import select_method

# Site A runs one vendor-capable machine; site B has two plain TCP clusters.
layout = JobLayout([
    SubjobSpec("A", "SP", 4, vendor=True),
    SubjobSpec("B", "C1", 4),
    SubjobSpec("B", "C2", 4),
])
topo = compute_topology(layout)

# The canonical text form is also what the launcher sends at startup.
print("rank depth colors")
print(topo.to_text())

# Equal colors at a level mean the ranks can talk directly at that level.
for level, name in enumerate(LEVEL_NAMES):
    clusters, loose = clusters_at_level(topo, level)
    print(f"{name:12s} clusters={clusters} no-color={loose}")

# Only ranks sharing a vendor color use the fast channel.
for a, b in [(0, 2), (0, 4), (4, 5), (4, 8)]:
    print(f"{a} -> {b}: {select_method(topo, a, b).value}")
