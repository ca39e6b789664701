"""``gridrun``: co-allocating launcher for gridmp jobs on one host.

Job file grammar, one directive per line, ``#`` starts a comment::

    subjob site=<word> machine=<word> count=<int> vendor=<true|false> exe=<path> [env.NAME=VALUE ...] [-- <args...>]
    option timeout=<seconds>
    option bind=<host>

Line order fixes subjob order and therefore world-rank assignment. Every
process is started with the GRIDMP_* bootstrap variables, registers with the
rendezvous, and is held until all processes have registered.

Exit codes: 0 success, 2 parse/validation error, 3 startup failure,
4 application failure, 130 interrupted.
"""
from __future__ import annotations

import argparse
import enum
import json
import os
import shlex
import shutil
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .bootstrap import Rendezvous
from .errors import GridMPError, StartupError, UsageError
from .topology import JobLayout, SubjobSpec, compute_topology

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_STARTUP = 3
EXIT_APP = 4
EXIT_INTERRUPTED = 130

DEFAULT_TIMEOUT = 30.0
DEFAULT_GRACE = 5.0


class JobFileError(UsageError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class SubjobEntry:
    spec: SubjobSpec
    exe: str
    args: list[str] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)
    line: int | None = None


@dataclass
class JobDescription:
    subjobs: list[SubjobEntry]
    timeout: float = DEFAULT_TIMEOUT
    bind: str = "127.0.0.1"
    base_dir: Path | None = None

    @property
    def layout(self) -> JobLayout:
        return JobLayout(e.spec for e in self.subjobs)


_SUBJOB_KEYS = {"site", "machine", "count", "vendor", "exe"}


def _parse_bool(value: str, lineno: int) -> bool:
    if value in ("true", "false"):
        return value == "true"
    raise JobFileError(f"vendor must be true or false, got {value!r}", lineno)


def parse_job(text: str | bytes, base_dir: Path | None = None) -> JobDescription:
    if isinstance(text, bytes):
        text = text.decode()
    subjobs: list[SubjobEntry] = []
    options: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise JobFileError(str(exc), lineno) from None
        if not tokens:
            continue
        directive, rest = tokens[0], tokens[1:]
        if directive == "option":
            for tok in rest:
                key, sep, value = tok.partition("=")
                if not sep or key not in ("timeout", "bind"):
                    raise JobFileError(f"unknown option {tok!r}", lineno)
                options[key] = value
            continue
        if directive != "subjob":
            raise JobFileError(f"unknown directive {directive!r}", lineno)
        args: list[str] = []
        if "--" in rest:
            i = rest.index("--")
            rest, args = rest[:i], rest[i + 1:]
        fields: dict[str, str] = {}
        env: dict[str, str] = {}
        for tok in rest:
            key, sep, value = tok.partition("=")
            if not sep:
                raise JobFileError(f"expected key=value, got {tok!r}", lineno)
            if key.startswith("env.") and len(key) > 4:
                env[key[4:]] = value
            elif key in _SUBJOB_KEYS:
                if key in fields:
                    raise JobFileError(f"duplicate key {key!r}", lineno)
                fields[key] = value
            else:
                raise JobFileError(f"unknown key {key!r}", lineno)
        missing = _SUBJOB_KEYS - fields.keys() - {"vendor"}
        if missing:
            raise JobFileError(f"missing keys {sorted(missing)}", lineno)
        try:
            count = int(fields["count"])
        except ValueError:
            raise JobFileError(f"count must be an integer, got {fields['count']!r}", lineno) from None
        if count < 1:
            raise JobFileError(f"count must be at least 1, got {count}", lineno)
        if not fields["exe"]:
            raise JobFileError("exe must not be empty", lineno)
        spec = SubjobSpec(fields["site"], fields["machine"], count,
                          _parse_bool(fields.get("vendor", "false"), lineno))
        subjobs.append(SubjobEntry(spec, fields["exe"], args, env, lineno))
    if not subjobs:
        raise JobFileError("job file declares no subjobs")
    try:
        timeout = float(options.get("timeout", DEFAULT_TIMEOUT))
    except ValueError:
        raise JobFileError(f"timeout must be a number, got {options['timeout']!r}") from None
    job = JobDescription(subjobs, timeout, options.get("bind", "127.0.0.1"), base_dir)
    machine_site: dict[str, str] = {}
    for e in subjobs:
        site = machine_site.setdefault(e.spec.machine_id, e.spec.site_id)
        if site != e.spec.site_id:
            raise JobFileError(f"machine {e.spec.machine_id!r} already belongs to site {site!r}", e.line)
    return job


class SubjobState(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    AT_BARRIER = "at_barrier"
    RELEASED = "released"
    TERMINATING = "terminating"
    EXITED = "exited"
    FAILED = "failed"


_TRANSITIONS = {
    SubjobState.PENDING: {SubjobState.RUNNING},
    SubjobState.RUNNING: {SubjobState.AT_BARRIER},
    SubjobState.AT_BARRIER: {SubjobState.RELEASED},
    SubjobState.RELEASED: {SubjobState.EXITED, SubjobState.TERMINATING},
    SubjobState.TERMINATING: {SubjobState.EXITED},
}


class OutputCollator:
    """Forward child stdout/stderr line by line with a ``[rank N] `` prefix."""

    def __init__(self, out=None, err=None):
        self.out = out if out is not None else sys.stdout.buffer
        self.err = err if err is not None else sys.stderr.buffer
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    def attach(self, rank: int, stream, to_err: bool) -> None:
        t = threading.Thread(target=self._pump, args=(rank, stream, self.err if to_err else self.out), daemon=True)
        t.start()
        self._threads.append(t)

    def _pump(self, rank: int, stream, sink) -> None:
        prefix = f"[rank {rank}] ".encode()
        with stream:
            for line in iter(stream.readline, b""):
                if not line.endswith(b"\n"):
                    line += b"\n"
                with self._lock:
                    sink.write(prefix + line)
                    sink.flush()

    def join(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)


class Job:
    """One running job: children, subjob states, rendezvous and event log."""

    def __init__(self, job: JobDescription, *, timeout: float | None = None, collate: bool = True,
                 out=None, err=None, grace: float = DEFAULT_GRACE):
        self.desc = job
        self.timeout = job.timeout if timeout is None else timeout
        self.collate = collate
        self.grace = grace
        self.layout = job.layout
        self.topology = compute_topology(self.layout)
        self.subjob_of = self.layout.subjob_of()
        self.procs: list[subprocess.Popen | None] = [None] * self.topology.world_size
        self.states = [SubjobState.PENDING] * len(job.subjobs)
        self.events: list[dict] = []
        self.released = False
        self.collator = OutputCollator(out, err) if collate else None
        self._err = err if err is not None else sys.stderr.buffer
        self._job_id = uuid.uuid4().hex[:8]
        self._registered = [0] * len(job.subjobs)

    def log(self, event: str, **info) -> None:
        self.events.append({"t": time.time(), "event": event, **info})

    def set_state(self, subjob: int, state: SubjobState, **info) -> None:
        current = self.states[subjob]
        if current == state or current in (SubjobState.EXITED, SubjobState.FAILED):
            return
        if state is not SubjobState.FAILED and state not in _TRANSITIONS[current]:
            raise RuntimeError(f"subjob {subjob}: illegal transition {current.value} -> {state.value}")
        self.states[subjob] = state
        self.log("state", subjob=subjob, state=state.value, **info)

    def diagnose(self, message: str) -> None:
        self._err.write(f"gridrun: {message}\n".encode())
        self._err.flush()

    def _resolve_exe(self, exe: str) -> str:
        if os.sep in exe:
            p = Path(exe)
            if not p.is_absolute() and self.desc.base_dir is not None and (self.desc.base_dir / p).exists():
                return str(self.desc.base_dir / p)
            return exe
        return shutil.which(exe) or exe

    def spawn(self, host: str, port: int) -> None:
        size = self.topology.world_size
        for j, entry in enumerate(self.desc.subjobs):
            first = self.layout.first_rank(j)
            exe = self._resolve_exe(entry.exe)
            for i in range(entry.spec.count):
                rank = first + i
                env = dict(os.environ)
                env.update(entry.env)
                env.update({
                    "GRIDMP_RANK": str(rank),
                    "GRIDMP_SIZE": str(size),
                    "GRIDMP_BOOTSTRAP": f"{host}:{port}",
                    "GRIDMP_SUBJOB": str(j),
                    "GRIDMP_TIMEOUT": str(self.timeout),
                    "GRIDMP_TCP_BIND": self.desc.bind,
                })
                env.pop("GRIDMP_VENDOR_KEY", None)
                if entry.spec.vendor:
                    env["GRIDMP_VENDOR_KEY"] = f"{self._job_id}.{j}"
                pipe = subprocess.PIPE if self.collate else None
                try:
                    proc = subprocess.Popen([exe, *entry.args], env=env, stdout=pipe, stderr=pipe,
                                            stdin=subprocess.DEVNULL, start_new_session=True)
                except OSError as exc:
                    self.set_state(j, SubjobState.FAILED, reason=str(exc))
                    raise StartupError(f"subjob {j}: cannot execute {exe!r}: {exc.strerror or exc}") from exc
                self.procs[rank] = proc
                self.log("spawn", rank=rank, subjob=j, pid=proc.pid)
                if self.collator is not None:
                    self.collator.attach(rank, proc.stdout, to_err=False)
                    self.collator.attach(rank, proc.stderr, to_err=True)

    def on_register(self, rank: int) -> None:
        j = self.subjob_of[rank]
        self.log("register", rank=rank, subjob=j)
        self._registered[j] += 1
        if self._registered[j] == 1:
            self.set_state(j, SubjobState.RUNNING)
        if self._registered[j] == self.desc.subjobs[j].spec.count:
            self.set_state(j, SubjobState.AT_BARRIER)

    def check_startup(self) -> None:
        for rank, proc in enumerate(self.procs):
            if proc is not None and proc.poll() is not None:
                j = self.subjob_of[rank]
                self.set_state(j, SubjobState.FAILED, reason=f"rank {rank} exited with {proc.returncode}")
                raise StartupError(
                    f"subjob {j} (rank {rank}) exited with status {proc.returncode} before the startup barrier"
                )

    def terminate_all(self, reason: str) -> None:
        """Stop every child: SIGTERM, then SIGKILL after the grace period."""
        self.log("terminate", reason=reason)
        for j, state in enumerate(self.states):
            if state is SubjobState.RELEASED:
                self.set_state(j, SubjobState.TERMINATING)
        live = [p for p in self.procs if p is not None and p.poll() is None]
        for p in live:
            _signal_group(p, signal.SIGTERM)
        deadline = time.monotonic() + self.grace
        for p in live:
            try:
                p.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                pass
        for p in live:
            if p.poll() is None:
                _signal_group(p, signal.SIGKILL)
                p.wait()
        for p in self.procs:
            if p is not None:
                _signal_group(p, signal.SIGKILL)  # stray grandchildren in the session
        for j, state in enumerate(self.states):
            if state is SubjobState.TERMINATING:
                self.set_state(j, SubjobState.EXITED)
            else:
                self.set_state(j, SubjobState.FAILED, reason=reason)
        self.log("terminated")

    def wait_children(self) -> int:
        failed = False
        for rank, p in enumerate(self.procs):
            code = p.wait()
            if code != 0:
                failed = True
                self.diagnose(f"rank {rank} exited with status {code}")
        for j, entry in enumerate(self.desc.subjobs):
            first = self.layout.first_rank(j)
            codes = [self.procs[first + i].returncode for i in range(entry.spec.count)]
            self.set_state(j, SubjobState.EXITED, code=next((c for c in codes if c), 0))
        return EXIT_APP if failed else EXIT_OK

    def run(self) -> int:
        rendezvous = Rendezvous(self.topology, self.desc.bind, on_register=self.on_register)
        host, port = rendezvous.address
        self.log("start", size=self.topology.world_size, bootstrap=f"{host}:{port}")
        previous = _install_sigterm()
        try:
            try:
                self.spawn(host, port)
                rendezvous.serve(self.timeout, check=self.check_startup)
            except StartupError as exc:
                self.diagnose(self._with_subjobs(str(exc), rendezvous.missing()))
                self.terminate_all(str(exc))
                return EXIT_STARTUP
            self.log("release", releases=rendezvous.events.releases_sent)
            self.released = True
            for j in range(len(self.states)):
                self.set_state(j, SubjobState.RELEASED)
            return self.wait_children()
        except KeyboardInterrupt:
            self.diagnose("interrupted; terminating all processes")
            self.terminate_all("interrupted")
            return EXIT_INTERRUPTED
        finally:
            rendezvous.close()
            if self.collator is not None:
                self.collator.join(timeout=5)
            signal.signal(signal.SIGTERM, previous)

    def _with_subjobs(self, message: str, missing: list[int]) -> str:
        if not missing or "subjob" in message:
            return message
        subjobs = sorted({self.subjob_of[r] for r in missing})
        return f"{message} (subjobs {subjobs})"


def _signal_group(proc: subprocess.Popen, sig: int) -> None:
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def _install_sigterm():
    if threading.current_thread() is not threading.main_thread():
        return signal.getsignal(signal.SIGTERM)
    return signal.signal(signal.SIGTERM, _raise_interrupt)


def launch(job: JobDescription, **kwargs) -> int:
    """Run ``job`` to completion and return the gridrun exit code."""
    return Job(job, **kwargs).run()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gridrun", description="Launch a gridmp job on this host.")
    parser.add_argument("-f", "--file", required=True, help="job description file")
    parser.add_argument("--timeout", type=float, help="startup barrier timeout in seconds")
    parser.add_argument("--no-collate", action="store_true", help="let children write directly to the terminal")
    parser.add_argument("--event-log", help="write launcher events as JSON lines to this path")
    args = parser.parse_args(argv)

    path = Path(args.file)
    try:
        desc = parse_job(path.read_bytes(), base_dir=path.resolve().parent)
        job = Job(desc, timeout=args.timeout, collate=not args.no_collate)
    except OSError as exc:
        print(f"gridrun: cannot read job file: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except GridMPError as exc:
        print(f"gridrun: {path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    code = job.run()
    if args.event_log:
        with open(args.event_log, "w") as f:
            for ev in job.events:
                f.write(json.dumps(ev) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
