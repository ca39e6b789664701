"""Run a whole job inside one Python process, one thread per rank.

Every rank gets its own Runtime with real listeners and sockets; only process
spawning is skipped. Handy for tests and notebooks::

    from gridmp.local import run_threads
    sizes = run_threads(layout, lambda rt: rt.world.size)
"""
from __future__ import annotations

import threading
import uuid
from typing import Any, Callable

from .api import Runtime, init
from .bootstrap import Rendezvous
from .topology import JobLayout, compute_topology


def run_threads(layout: JobLayout, target: Callable[[Runtime], Any], *, timeout: float = 60.0,
                finalize: bool = True) -> list[Any]:
    """Call ``target(runtime)`` on every rank and return the results in rank order.

    The first exception raised by any rank is re-raised here.
    """
    topo = compute_topology(layout)
    subjob_of = layout.subjob_of()
    job_id = uuid.uuid4().hex[:8]
    rendezvous = Rendezvous(topo)
    host, port = rendezvous.address
    results: list[Any] = [None] * topo.world_size
    errors: list[BaseException | None] = [None] * topo.world_size

    def rank_main(rank: int) -> None:
        spec = layout.subjobs[subjob_of[rank]]
        key = f"{job_id}.{subjob_of[rank]}" if spec.vendor else None
        try:
            rt = init(rank=rank, size=topo.world_size, bootstrap=f"{host}:{port}", vendor_key=key,
                      timeout=timeout)
            try:
                results[rank] = target(rt)
            except BaseException:
                rt.transport.close()
                raise
            if finalize:
                rt.finalize()
        except BaseException as exc:  # reported to the caller below
            errors[rank] = exc

    threads = [threading.Thread(target=rank_main, args=(r,), daemon=True, name=f"gridmp-rank-{r}")
               for r in range(topo.world_size)]
    for t in threads:
        t.start()
    try:
        rendezvous.serve(timeout)
    finally:
        for t in threads:
            t.join(timeout)
        rendezvous.close()
    hung = [r for r, t in enumerate(threads) if t.is_alive()]
    for exc in errors:
        if exc is not None:
            raise exc
    if hung:
        raise TimeoutError(f"ranks {hung} did not finish within {timeout}s")
    return results
