import os
import subprocess
import sys
from pathlib import Path

import pytest

from gridmp import JobLayout, SubjobSpec, compute_topology

APPS = Path(__file__).parent / "apps"

GRID12 = JobLayout([
    SubjobSpec("A", "SP", 4, vendor=True),
    SubjobSpec("B", "C1", 4, vendor=False),
    SubjobSpec("B", "C2", 4, vendor=False),
])


@pytest.fixture
def grid12():
    return GRID12


@pytest.fixture
def grid12_topo():
    return compute_topology(GRID12)


def job_text(subjobs, options=()):
    """Job file text; ``subjobs`` holds (site, machine, count, vendor, app, args) tuples."""
    lines = [f"option {o}" for o in options]
    for site, machine, count, vendor, app, args in subjobs:
        argv = " ".join([str(APPS / app), *map(str, args)])
        lines.append(
            f"subjob site={site} machine={machine} count={count} "
            f"vendor={'true' if vendor else 'false'} exe={sys.executable} -- {argv}"
        )
    return "\n".join(lines) + "\n"


def grid12_job(app, args=()):
    return job_text([
        ("A", "SP", 4, True, app, args),
        ("B", "C1", 4, False, app, args),
        ("B", "C2", 4, False, app, args),
    ])


def gridrun(tmp_path, text, *extra, timeout=120, **popen):
    """Run gridrun as a subprocess on a job file; returns CompletedProcess."""
    path = tmp_path / "job.txt"
    path.write_text(text)
    env = dict(os.environ)
    env.pop("GRIDMP_RANK", None)
    return subprocess.run(
        [sys.executable, "-m", "gridmp.launcher", "-f", str(path), *extra],
        capture_output=True, text=True, timeout=timeout, env=env, **popen,
    )


def rank_lines(stdout):
    """Map rank -> list of payload lines from collated output."""
    out = {}
    for line in stdout.splitlines():
        if line.startswith("[rank "):
            head, _, rest = line.partition("] ")
            out.setdefault(int(head[6:]), []).append(rest)
    return out
