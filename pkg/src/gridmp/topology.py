"""Multilevel clustering of world ranks into depths and colors.

Level 0 is the wide area, 1 the local area (site), 2 the system area
(machine) and 3 the vendor channel. Every rank has depth 3; ranks of a
vendor-capable subjob have depth 4.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import UsageError

WIDE_AREA = 0
LOCAL_AREA = 1
SYSTEM_AREA = 2
VENDOR = 3
LEVEL_NAMES = ("wide_area", "local_area", "system_area", "vendor")


@dataclass(frozen=True)
class SubjobSpec:
    site_id: str
    machine_id: str
    count: int
    vendor: bool = False


@dataclass(frozen=True)
class JobLayout:
    subjobs: tuple[SubjobSpec, ...]

    def __init__(self, subjobs: Iterable[SubjobSpec]):
        object.__setattr__(self, "subjobs", tuple(subjobs))
        self.validate()

    def validate(self) -> None:
        if not self.subjobs:
            raise UsageError("job layout has no subjobs")
        machine_site: dict[str, str] = {}
        for i, sj in enumerate(self.subjobs):
            if not sj.site_id or not sj.machine_id:
                raise UsageError(f"subjob {i}: site and machine must be non-empty")
            if not isinstance(sj.count, int) or sj.count < 1:
                raise UsageError(f"subjob {i}: count must be a positive integer, got {sj.count!r}")
            site = machine_site.setdefault(sj.machine_id, sj.site_id)
            if site != sj.site_id:
                raise UsageError(
                    f"subjob {i}: machine {sj.machine_id!r} already belongs to site {site!r}"
                )

    @property
    def world_size(self) -> int:
        return sum(sj.count for sj in self.subjobs)

    def subjob_of(self) -> list[int]:
        """Subjob index for every world rank."""
        out: list[int] = []
        for j, sj in enumerate(self.subjobs):
            out.extend([j] * sj.count)
        return out

    def first_rank(self, subjob: int) -> int:
        return sum(sj.count for sj in self.subjobs[:subjob])


@dataclass(frozen=True)
class TopologyMap:
    depths: tuple[int, ...]
    colors: tuple[tuple[int, ...], ...]

    @property
    def world_size(self) -> int:
        return len(self.depths)

    def check_rank(self, r: int) -> None:
        if not 0 <= r < len(self.depths):
            raise UsageError(f"rank {r} out of range for world size {len(self.depths)}")

    def restrict(self, members: Sequence[int]) -> "TopologyMap":
        """View of the map over ``members``, indexed by position in ``members``."""
        return TopologyMap(
            tuple(self.depths[r] for r in members),
            tuple(self.colors[r] for r in members),
        )

    def to_text(self) -> str:
        lines = []
        for r, (d, cs) in enumerate(zip(self.depths, self.colors)):
            lines.append(" ".join(str(v) for v in (r, d, *cs)))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> "TopologyMap":
        depths, colors = [], []
        for n, line in enumerate(text.splitlines()):
            fields = [int(f) for f in line.split()]
            if len(fields) < 2 or fields[0] != n or len(fields) != 2 + fields[1]:
                raise ValueError(f"malformed topology line {n}: {line!r}")
            depths.append(fields[1])
            colors.append(tuple(fields[2:]))
        return cls(tuple(depths), tuple(colors))


def _first_appearance(keys: Sequence) -> list[int]:
    seen: dict = {}
    return [seen.setdefault(k, len(seen)) for k in keys]


def compute_topology(layout: JobLayout) -> TopologyMap:
    layout.validate()
    subjob = layout.subjob_of()
    specs = [layout.subjobs[j] for j in subjob]
    n = len(specs)
    level1 = _first_appearance([s.site_id for s in specs])
    level2 = _first_appearance([(s.site_id, s.machine_id) for s in specs])
    vendor_ranks = [r for r in range(n) if specs[r].vendor]
    level3 = dict(zip(vendor_ranks, _first_appearance([subjob[r] for r in vendor_ranks])))

    depths, colors = [], []
    for r in range(n):
        cs = [0, level1[r], level2[r]]
        if r in level3:
            cs.append(level3[r])
        depths.append(len(cs))
        colors.append(tuple(cs))
    return TopologyMap(tuple(depths), tuple(colors))


def same_color(topo: TopologyMap, r: int, s: int, level: int) -> bool:
    topo.check_rank(r)
    topo.check_rank(s)
    if level < 0:
        raise UsageError(f"level must be non-negative, got {level}")
    return (
        topo.depths[r] > level
        and topo.depths[s] > level
        and topo.colors[r][level] == topo.colors[s][level]
    )


def clusters_at_level(
    topo: TopologyMap, level: int, ranks: Iterable[int] | None = None
) -> tuple[list[list[int]], list[int]]:
    """Partition ``ranks`` (default: all) by their color at ``level``.

    Returns ``(clusters, unclustered)``; clusters are ordered by their smallest
    rank and ranks with depth <= level are listed in ``unclustered``.
    """
    ranks = range(topo.world_size) if ranks is None else sorted(ranks)
    groups: dict[int, list[int]] = {}
    unclustered = []
    for r in ranks:
        if topo.depths[r] > level:
            groups.setdefault(topo.colors[r][level], []).append(r)
        else:
            unclustered.append(r)
    clusters = sorted(groups.values(), key=lambda c: c[0])
    return clusters, unclustered
