"""gridmp: a small grid-aware message-passing runtime.

Processes are grouped into sites, machines and vendor-channel clusters; the
runtime picks the cheapest transport per pair, avoids polling TCP when no
pending receive can need it, and runs broadcast/reduce over per-level trees.
"""
from .api import (
    TOPOLOGY_COLORS,
    TOPOLOGY_DEPTHS,
    UNDEFINED,
    Communicator,
    Runtime,
    attr_get,
    comm_free,
    comm_rank,
    comm_size,
    comm_split,
    init,
)
from .collectives import BINOMIAL, MAX, MIN, MULTILEVEL, SUM
from .errors import GridMPError, ProtocolError, StartupError, TransportError, TruncationError, UsageError
from .progress import ANY_SOURCE, ANY_TAG, Category, Status
from .topology import JobLayout, SubjobSpec, TopologyMap, compute_topology
from .transport import Method

__version__ = "0.1.0"

__all__ = [
    "ANY_SOURCE", "ANY_TAG", "BINOMIAL", "Category", "Communicator", "GridMPError", "JobLayout",
    "MAX", "MIN", "MULTILEVEL", "Method", "ProtocolError", "Runtime", "StartupError", "Status",
    "SUM", "SubjobSpec", "TOPOLOGY_COLORS", "TOPOLOGY_DEPTHS", "TopologyMap", "TransportError",
    "TruncationError", "UNDEFINED", "UsageError", "attr_get", "comm_free", "comm_rank", "comm_size",
    "comm_split", "compute_topology", "init",
]
