import io
import json
import os
import signal
import subprocess
import sys
import time

import psutil
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import APPS, grid12_job, gridrun, job_text, rank_lines
from gridmp.launcher import Job, JobFileError, OutputCollator, SubjobState, parse_job


def alive(pid):
    try:
        return psutil.Process(pid).status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False


def test_parse_example_line():
    job = parse_job("subjob site=A machine=SP count=4 vendor=true exe=./app -- -n 10\n")
    (entry,) = job.subjobs
    spec = entry.spec
    assert (spec.site_id, spec.machine_id, spec.count, spec.vendor) == ("A", "SP", 4, True)
    assert entry.exe == "./app" and entry.args == ["-n", "10"]


def test_parse_two_subjobs_options_and_comments():
    text = """
    # a comment
    option timeout=12.5 bind=127.0.0.1
    subjob site=A machine=M1 count=2 exe=app env.FOO=bar   # trailing comment
    subjob site=B machine=M2 count=3 vendor=false exe="my app" -- "two words"
    """
    job = parse_job(text)
    assert job.timeout == 12.5 and job.bind == "127.0.0.1"
    assert [e.spec.count for e in job.subjobs] == [2, 3]
    assert job.subjobs[0].env == {"FOO": "bar"} and not job.subjobs[0].spec.vendor
    assert job.subjobs[1].exe == "my app" and job.subjobs[1].args == ["two words"]
    assert job.layout.subjob_of() == [0, 0, 1, 1, 1]


@pytest.mark.parametrize("text, fragment", [
    ("subjob site=A machine=M count=0 exe=a\n", "line 1: count must be at least 1"),
    ("\nsubjob site=A machine=M count=1 exe=a colour=red\n", "line 2: unknown key 'colour'"),
    ("subjob site=A machine=M count=1 exe=a\nsubjob site=B machine=M count=1 exe=a\n", "line 2: machine 'M'"),
    ("launch x\n", "line 1: unknown directive"),
    ("subjob site=A machine=M count=1 exe='a\n", "line 1"),
    ("subjob site=A machine=M count=1 vendor=yes exe=a\n", "vendor must be"),
    ("subjob site=A count=1 exe=a\n", "missing keys"),
    ("option retries=3\nsubjob site=A machine=M count=1 exe=a\n", "unknown option"),
    ("# nothing here\n", "no subjobs"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(JobFileError, match=fragment):
        parse_job(text)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(1, 5), st.booleans()), min_size=1, max_size=8))
def test_rank_assignment(rows):
    text = "".join(f"subjob site=S{s} machine=S{s}M{i} count={c} vendor={str(v).lower()} exe=x\n"
                   for i, (s, c, v) in enumerate(rows))
    layout = parse_job(text).layout
    subjob_of = layout.subjob_of()
    rank = 0
    for j, (_, count, _) in enumerate(rows):
        for i in range(count):
            assert subjob_of[rank] == j
            assert layout.first_rank(j) + i == rank
            rank += 1
    assert layout.world_size == rank


def test_illegal_state_transition():
    job = Job(parse_job("subjob site=A machine=M count=1 exe=x\n"))
    with pytest.raises(RuntimeError, match="illegal transition"):
        job.set_state(0, SubjobState.RELEASED)
    job.set_state(0, SubjobState.RUNNING)
    job.set_state(0, SubjobState.FAILED, reason="test")
    assert job.states[0] is SubjobState.FAILED


def test_collator_prefixes_and_partial_lines():
    out = io.BytesIO()
    col = OutputCollator(out, out)
    r, w = os.pipe()
    col.attach(3, os.fdopen(r, "rb"), to_err=False)
    os.write(w, b"hello\npartial")
    os.close(w)
    col.join(5)
    assert out.getvalue() == b"[rank 3] hello\n[rank 3] partial\n"


def test_grid12_trivial_job(tmp_path):
    log = tmp_path / "events.jsonl"
    res = gridrun(tmp_path, grid12_job("barrier_app.py", ["0"]), "--event-log", str(log))
    assert res.returncode == 0, res.stderr
    lines = rank_lines(res.stdout)
    assert sorted(lines) == list(range(12))
    events = [json.loads(x) for x in log.read_text().splitlines()]
    assert sum(e["event"] == "register" for e in events) == 12
    (release,) = [e for e in events if e["event"] == "release"]
    assert release["releases"] == 1
    states = [(e["subjob"], e["state"]) for e in events if e["event"] == "state"]
    for j in range(3):
        assert [s for k, s in states if k == j] == ["running", "at_barrier", "released", "exited"]


def test_collation_stress(tmp_path):
    text = job_text([("A", "M", 2, True, "lines.py", [1000])])
    res = gridrun(tmp_path, text)
    assert res.returncode == 0, res.stderr
    out = res.stdout.splitlines()
    assert len(out) == 2000
    assert all(line.startswith("[rank ") and line.count("[rank ") == 1 for line in out)
    per_rank = rank_lines(res.stdout)
    for r in (0, 1):
        assert per_rank[r] == [f"line {i} of rank {r}" for i in range(1000)]
    assert sorted(res.stderr.splitlines()) == ["[rank 0] err 0", "[rank 1] err 1"]


def test_partial_line_flushed_at_exit(tmp_path):
    res = gridrun(tmp_path, job_text([("A", "M", 1, False, "lines.py", [1, "partial"])]))
    assert res.returncode == 0
    assert res.stdout.splitlines() == ["[rank 0] line 0 of rank 0", "[rank 0] partial 0"]


def test_single_process_job(tmp_path):
    res = gridrun(tmp_path, job_text([("A", "M", 1, True, "barrier_app.py", [0])]))
    assert res.returncode == 0
    assert json.loads(rank_lines(res.stdout)[0][0])["rank"] == 0


def test_invalid_executable_tears_down(tmp_path):
    text = job_text([("A", "M", 2, False, "barrier_app.py", [0, "hang"])])
    text += "subjob site=B machine=N count=1 exe=/nonexistent/binary\n"
    log = tmp_path / "events.jsonl"
    res = gridrun(tmp_path, text, "--event-log", str(log))
    assert res.returncode == 3
    assert "subjob 1" in res.stderr
    pids = [json.loads(x)["pid"] for x in log.read_text().splitlines() if '"spawn"' in x]
    assert len(pids) == 2
    assert not any(alive(p) for p in pids)


def test_startup_timeout_names_missing_subjob(tmp_path):
    text = job_text([("A", "M", 2, False, "barrier_app.py", [0])])
    text += f"subjob site=B machine=N count=1 exe={sys.executable} -- -c 'import time; time.sleep(60)'\n"
    log = tmp_path / "events.jsonl"
    t0 = time.monotonic()
    res = gridrun(tmp_path, text, "--timeout", "2", "--event-log", str(log))
    assert res.returncode == 3
    assert time.monotonic() - t0 < 20
    assert "unregistered ranks [2]" in res.stderr and "subjobs [1]" in res.stderr
    pids = [json.loads(x)["pid"] for x in log.read_text().splitlines() if '"spawn"' in x]
    assert not any(alive(p) for p in pids)


def test_app_failure_exit_code(tmp_path):
    res = gridrun(tmp_path, job_text([("A", "M", 3, False, "exit_code.py", [7])]))
    assert res.returncode == 4
    assert "rank 0 exited with status 7" in res.stderr


def test_parse_error_exit_code(tmp_path):
    res = gridrun(tmp_path, "subjob site=A machine=M count=0 exe=x\n")
    assert res.returncode == 2
    assert "line 1" in res.stderr


def interrupt_job(tmp_path, sig):
    """Start a hanging 12-rank job, wait for all releases, deliver ``sig``; returns (code, child pids)."""
    path = tmp_path / "job.txt"
    path.write_text(grid12_job("barrier_app.py", ["0", "hang"]))
    proc = subprocess.Popen([sys.executable, "-m", "gridmp.launcher", "-f", str(path)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    pids = []
    while len(pids) < 12:
        line = proc.stdout.readline()
        assert line, proc.stderr.read()
        pids.append(json.loads(line.partition("] ")[2])["pid"])
    assert all(alive(p) for p in pids)
    proc.send_signal(sig)
    code = proc.wait(30)
    proc.stdout.close()
    proc.stderr.close()
    return code, pids


@pytest.mark.parametrize("sig", [signal.SIGINT, signal.SIGTERM])
def test_interrupt_leaves_no_orphans(tmp_path, sig):
    code, pids = interrupt_job(tmp_path, sig)
    assert code == 130
    assert not any(alive(p) for p in pids)


def test_missing_job_file(tmp_path):
    res = subprocess.run([sys.executable, "-m", "gridmp.launcher", "-f", str(tmp_path / "none.txt")],
                         capture_output=True, text=True)
    assert res.returncode == 2


def test_relative_exe_resolved_against_job_file(tmp_path):
    app = tmp_path / "app.sh"
    app.write_text(f"#!/bin/sh\nexec {sys.executable} {APPS / 'barrier_app.py'} 0\n")
    app.chmod(0o755)
    res = gridrun(tmp_path, "subjob site=A machine=M count=2 exe=./app.sh\n", cwd="/")
    assert res.returncode == 0, res.stderr
    assert sorted(rank_lines(res.stdout)) == [0, 1]
