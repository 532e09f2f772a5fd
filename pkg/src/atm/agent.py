"""The job wrapper runtime executed on the worker node.

The wrapper spawns the original job, tees its stdout/stderr to the files the
job description names, parses progress lines out of the stdout stream, and
pushes monitoring events to the ATM server every ``retry_count`` seconds over
outbound connections only.  The child is never delayed or killed on behalf of
monitoring: push failures buffer events in a local spool file and retry, and
the wrapper's own exit code is always the child's.

Progress parsing is driven by a configurable ordered list of regex templates
with ``done``/``total`` capture groups; the default matches lines like
"completed 20 from 200 events".  Jobs whose stdout is fully buffered will
deliver progress late; ``estimate_buffer_fill`` quantifies how late, and the
output-file size poller provides the indirect fallback signal for that case.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import re
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

from .client import AtmClient
from .errors import AtmError, AuthFailed, TransportError

log = logging.getLogger("atm.agent")

SPOOL_DIR_ENV = "ATM_SPOOL_DIR"

DEFAULT_PROGRESS_PATTERNS = (
    r"completed\s+(?P<done>\d+)\s+from\s+(?P<total>\d+)\s+events",
)

DEFAULT_STDOUT_NAME = "atm-stdout.log"
DEFAULT_STDERR_NAME = "atm-stderr.log"


class SpawnFailed(Exception):
    """The original executable could not be started."""


class WrapperArgsError(ValueError):
    """The wrapper invocation or Arguments token run is malformed."""


class DomainError(ValueError):
    """An arithmetic helper was fed a non-positive quantity."""


@dataclass(frozen=True)
class ProgressPattern:
    """Ordered templates; the first whose regex matches a line wins."""

    templates: tuple[str, ...] = DEFAULT_PROGRESS_PATTERNS

    def compiled(self) -> tuple[re.Pattern, ...]:
        return tuple(re.compile(t) for t in self.templates)


def parse_progress_line(line: str,
                        patterns: Optional[ProgressPattern] = None) -> Optional[tuple[int, int]]:
    """Extract (done, total) from a line, or None if nothing usable matches.

    A match only counts when both captures are non-negative integers with
    done <= total; anything malformed is treated as no match, never an error.
    """
    compiled = (patterns or ProgressPattern()).compiled()
    for pattern in compiled:
        m = pattern.search(line)
        if not m:
            continue
        try:
            done = int(m.group("done"))
            total = int(m.group("total"))
        except (ValueError, IndexError):
            continue
        if 0 <= done <= total:
            return (done, total)
    return None


@dataclass
class BufferEstimate:
    lines_to_fill: int
    delay: float


def estimate_buffer_fill(buffer_bytes: int, line_bytes: int,
                         line_interval: float) -> BufferEstimate:
    """How long until a fully buffered stdout first flushes.

    With a buffer of ``buffer_bytes`` and one ``line_bytes``-sized line every
    ``line_interval``, the first flush happens after
    floor(buffer_bytes / line_bytes) lines, i.e. that many intervals.  The
    delay is returned in the units of ``line_interval``.
    """
    if buffer_bytes <= 0 or line_bytes <= 0 or line_interval <= 0:
        raise DomainError("buffer_bytes, line_bytes and line_interval must be positive")
    lines = buffer_bytes // line_bytes
    return BufferEstimate(lines_to_fill=lines, delay=lines * line_interval)


def iter_file_sizes(path: str | os.PathLike, period: float,
                    stop: threading.Event) -> Iterator[int]:
    """Yield the file's byte count whenever it changes, polling every period.

    A missing file counts as size 0; no value is yielded until the size first
    moves away from the last observation.
    """
    last = 0
    while not stop.is_set():
        try:
            size = os.stat(path).st_size
        except OSError:
            size = 0
        if size != last:
            last = size
            yield size
        stop.wait(period)


# ---------------------------------------------------------------------------
# Wrapper arguments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WrapperArgs:
    job_id: str
    password: str
    site: str
    atm_url: str
    command: str
    command_args: tuple[str, ...] = ()
    retry_count: float = 10.0
    stdout_path: str = DEFAULT_STDOUT_NAME
    stderr_path: str = DEFAULT_STDERR_NAME
    watch_path: Optional[str] = None

    @classmethod
    def from_argv(cls, argv: list[str]) -> "WrapperArgs":
        """Parse the canonical CLI form:

        -id=I -password=P -site=S -atm=URL [-retry=SEC] [-stdout=F]
        [-stderr=F] [-watch=F] [--] command [args...]
        """
        flags: dict[str, str] = {}
        rest: list[str] = []
        tokens = list(argv)
        while tokens:
            token = tokens.pop(0)
            if token == "--":
                rest = tokens
                break
            m = re.match(r"-(id|password|site|atm|retry|stdout|stderr|watch)=(.*)\Z", token)
            if m:
                flags[m.group(1)] = m.group(2)
            else:
                rest = [token] + tokens
                break
        for required in ("id", "password", "site", "atm"):
            if not flags.get(required):
                raise WrapperArgsError(f"missing -{required}=<value>")
        if not rest:
            raise WrapperArgsError("no command to run")
        try:
            retry = float(flags.get("retry", "10"))
        except ValueError:
            raise WrapperArgsError(f"bad -retry value {flags['retry']!r}")
        if retry <= 0:
            raise WrapperArgsError("-retry must be positive")
        return cls(
            job_id=flags["id"], password=flags["password"], site=flags["site"],
            atm_url=flags["atm"], command=rest[0], command_args=tuple(rest[1:]),
            retry_count=retry,
            stdout_path=flags.get("stdout", DEFAULT_STDOUT_NAME),
            stderr_path=flags.get("stderr", DEFAULT_STDERR_NAME),
            watch_path=flags.get("watch") or None,
        )


# ---------------------------------------------------------------------------
# Event spool
# ---------------------------------------------------------------------------

class EventSpool:
    """Pending monitoring events, mirrored to a JSON-lines file.

    Events stay queued until the server acknowledges them, so a transient
    outage loses nothing; the file survives even a wrapper crash for
    post-mortem inspection.
    """

    def __init__(self, job_id: str, directory: Optional[str] = None):
        directory = directory or os.environ.get(SPOOL_DIR_ENV) or "."
        Path(directory).mkdir(parents=True, exist_ok=True)
        self.path = Path(directory) / f"atm-spool-{job_id}.jsonl"
        self._pending: list[dict[str, Any]] = []

    def push(self, event_fields: dict[str, Any]) -> None:
        self._pending.append(event_fields)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event_fields, sort_keys=True) + "\n")

    def pending(self) -> list[dict[str, Any]]:
        return list(self._pending)

    def ack(self, count: int) -> None:
        """Drop the first ``count`` events and rewrite the mirror file."""
        self._pending = self._pending[count:]
        tmp = self.path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for fields in self._pending:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def __len__(self) -> int:
        return len(self._pending)


# ---------------------------------------------------------------------------
# The wrapper itself
# ---------------------------------------------------------------------------

def _drain(stream, sink_path: str, parsed: Optional[queue.Queue],
           patterns: ProgressPattern) -> None:
    """Copy a child stream to its file byte-for-byte, parsing progress lines."""
    with open(sink_path, "wb") as sink:
        for chunk in iter(stream.readline, b""):
            sink.write(chunk)
            sink.flush()
            if parsed is not None:
                line = chunk.decode("utf-8", errors="replace").rstrip("\r\n")
                hit = parse_progress_line(line, patterns)
                if hit is not None:
                    parsed.put({"kind": "progress", "done": hit[0],
                                "total": hit[1], "raw": line,
                                "timestamp": time.time()})
    stream.close()


class _Pusher:
    """Owns the spool and the connection to the server; tolerates outages."""

    def __init__(self, args: WrapperArgs, client: Optional[AtmClient],
                 spool_dir: Optional[str]):
        self.args = args
        self.client = client or AtmClient(args.atm_url, role="WN")
        self.spool = EventSpool(args.job_id, spool_dir)
        self.server_seen = False

    def enqueue(self, fields: dict[str, Any]) -> None:
        self.spool.push(fields)

    def flush(self) -> bool:
        """Send everything pending, in order.  False if the server is down."""
        sent = 0
        try:
            for fields in self.spool.pending():
                self.client.job_update(self.args.job_id, self.args.password, fields)
                sent += 1
                self.server_seen = True
        except TransportError:
            return False
        except AuthFailed:
            # Bad ticket never heals; drop the backlog rather than loop forever.
            log.error("job %s: server rejected the ticket, monitoring disabled",
                      self.args.job_id)
            self.spool.ack(len(self.spool))
            return True
        except AtmError as exc:
            log.warning("job %s: server refused an event: %s", self.args.job_id, exc)
            sent += 1  # poison event: drop it and keep going
        finally:
            if sent:
                self.spool.ack(sent)
        return len(self.spool) == 0


def run_wrapped(args: WrapperArgs, *, client: Optional[AtmClient] = None,
                patterns: Optional[ProgressPattern] = None,
                spool_dir: Optional[str] = None,
                flush_deadline: float = 30.0) -> int:
    """Run the original command under monitoring; returns the child's exit code.

    Lifecycle: a started event at spawn, a batch of parsed progress events
    every ``args.retry_count`` seconds (a heartbeat when a cycle has nothing
    new and the child is still alive), then finished(exit_code) after the
    child exits with all residual lines flushed first.  A server outage never
    delays or kills the child; after the child exits the wrapper keeps
    retrying the spool for at most ``flush_deadline`` seconds.
    """
    patterns = patterns or ProgressPattern()
    pusher = _Pusher(args, client, spool_dir)
    parsed: queue.Queue = queue.Queue()

    try:
        child = subprocess.Popen(
            [args.command, *args.command_args],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    except OSError as exc:
        pusher.enqueue({"kind": "failed", "timestamp": time.time(),
                        "raw": f"spawn failed: {exc}"})
        pusher.flush()
        raise SpawnFailed(f"{args.command}: {exc}")

    stdout_thread = threading.Thread(
        target=_drain, args=(child.stdout, args.stdout_path, parsed, patterns),
        name="atm-drain-stdout", daemon=True)
    stderr_thread = threading.Thread(
        target=_drain, args=(child.stderr, args.stderr_path, None, patterns),
        name="atm-drain-stderr", daemon=True)
    stdout_thread.start()
    stderr_thread.start()

    pusher.enqueue({"kind": "started", "timestamp": time.time()})
    pusher.flush()

    watcher_stop = threading.Event()
    watcher_thread: Optional[threading.Thread] = None
    if args.watch_path:
        def _watch():
            for size in iter_file_sizes(args.watch_path, min(args.retry_count, 1.0),
                                        watcher_stop):
                parsed.put({"kind": "indirect_size", "file_size": size,
                            "timestamp": time.time()})
        watcher_thread = threading.Thread(target=_watch, name="atm-watch", daemon=True)
        watcher_thread.start()

    child_done = threading.Event()

    def _reap():
        child.wait()
        child_done.set()

    reaper = threading.Thread(target=_reap, name="atm-reap", daemon=True)
    reaper.start()

    # Push loop: wake on the period or as soon as the child finishes.
    while True:
        finished = child_done.wait(timeout=args.retry_count)
        cycle_events = []
        while True:
            try:
                cycle_events.append(parsed.get_nowait())
            except queue.Empty:
                break
        if finished:
            # Residual output may still be in flight; join the drains first.
            stdout_thread.join()
            stderr_thread.join()
            watcher_stop.set()
            if watcher_thread is not None:
                watcher_thread.join(timeout=2)
            while True:
                try:
                    cycle_events.append(parsed.get_nowait())
                except queue.Empty:
                    break
            for fields in cycle_events:
                pusher.enqueue(fields)
            break
        if not cycle_events:
            cycle_events.append({"kind": "heartbeat", "timestamp": time.time()})
        for fields in cycle_events:
            pusher.enqueue(fields)
        pusher.flush()

    exit_code = child.returncode
    pusher.enqueue({"kind": "finished", "exit_code": exit_code,
                    "timestamp": time.time()})

    deadline = time.monotonic() + flush_deadline
    while not pusher.flush():
        if time.monotonic() >= deadline:
            log.warning("job %s: server unreachable, %d events left in spool %s",
                        args.job_id, len(pusher.spool), pusher.spool.path)
            break
        time.sleep(min(args.retry_count, 1.0))

    return exit_code
