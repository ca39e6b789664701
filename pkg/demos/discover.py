#!/usr/bin/env python3
"""Topology discovery under gridrun: derive site and vendor communicators from attributes.

Launch with ``gridrun -f demos/jobs/discover.job``.
"""
import gridmp

rt = gridmp.init()
world = rt.world
me = world.rank
depths, _ = world.attr_get(gridmp.TOPOLOGY_DEPTHS)
colors, _ = world.attr_get(gridmp.TOPOLOGY_COLORS)

# One communicator per site.
lan = world.split(colors[me][1], 0)

# Ranks without a vendor channel get lumped together under color -1 ...
vendor_or_rest = world.split(colors[me][3] if depths[me] == 4 else -1, 0)

# ... or left out entirely.
vendor_only = world.split(colors[me][3] if depths[me] == 4 else gridmp.UNDEFINED, 0)

print(f"site comm {lan.members} (my rank {lan.rank}/{lan.size}); "
      f"vendor-or-rest {vendor_or_rest.members}; "
      f"vendor-only {None if vendor_only is None else vendor_only.members}")
rt.finalize()
