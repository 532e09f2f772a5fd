"""File-backed persistence for users, jobs and per-job event logs.

On-disk layout under the store root:

    users.jsonl            append log of user records, last write wins per subject
    jobs.jsonl             append log of job records, last write wins per job_id
    events/<job_id>.jsonl  append-only event log, one JSON object per line
    LOCK                   advisory flock guarding against a second process

A write is acknowledged only after the line is flushed (and fsynced under the
default policy), so everything acknowledged survives a hard kill.  Reopening
replays the logs into in-memory indexes; a torn trailing line from a crash
mid-write is discarded.  The flock is released by the OS when the owning
process dies, so a store can be reopened immediately after a kill -9.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
from pathlib import Path
from typing import IO, Optional

from .errors import IllegalTransition, IoFailure, NotFound, StoreLocked
from .model import LEGAL_TRANSITIONS, JobRecord, MonitoringEvent, UserRecord


def _replay_lines(path: Path) -> list[dict]:
    """Parse a JSON-lines file, dropping a torn (unparseable) final line."""
    if not path.exists():
        return []
    with path.open("rb") as fh:
        lines = [line for line in fh.read().split(b"\n") if line.strip()]
    records = []
    for index, line in enumerate(lines):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if index == len(lines) - 1:
                break  # interrupted final append, never acknowledged
            raise IoFailure(f"corrupt record at {path}:{index + 1}")
    return records


class Store:
    """Single-process store handle; safe for concurrent threads."""

    def __init__(self, root: str | os.PathLike, fsync_on_append: bool = True):
        self.root = Path(root)
        self.fsync_on_append = fsync_on_append
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "events").mkdir(exist_ok=True)

        self._lock_file = (self.root / "LOCK").open("a+")
        try:
            fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self._lock_file.close()
            raise StoreLocked(f"store at {self.root} is in use by another process")

        self._users_lock = threading.RLock()
        self._jobs_lock = threading.RLock()
        self._events_lock = threading.RLock()

        self._users: dict[str, UserRecord] = {}
        self._jobs: dict[str, JobRecord] = {}
        self._events: dict[str, list[MonitoringEvent]] = {}

        for obj in _replay_lines(self.root / "users.jsonl"):
            record = UserRecord.from_wire(obj)
            self._users[record.subject] = record
        for obj in _replay_lines(self.root / "jobs.jsonl"):
            record = JobRecord.from_wire(obj)
            self._jobs[record.job_id] = record
        for path in sorted((self.root / "events").glob("*.jsonl")):
            events = [MonitoringEvent.from_wire(obj) for obj in _replay_lines(path)]
            if events:
                self._events[events[0].job_id] = events

        self._users_fh = (self.root / "users.jsonl").open("a", encoding="utf-8")
        self._jobs_fh = (self.root / "jobs.jsonl").open("a", encoding="utf-8")
        self._event_fhs: dict[str, IO[str]] = {}
        self._closed = False

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for fh in [self._users_fh, self._jobs_fh, *self._event_fhs.values()]:
            try:
                fh.flush()
                os.fsync(fh.fileno())
            except (OSError, ValueError):
                pass
            fh.close()
        fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_UN)
        self._lock_file.close()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _append_line(self, fh: IO[str], obj: dict) -> None:
        try:
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
            fh.flush()
            if self.fsync_on_append:
                os.fsync(fh.fileno())
        except OSError as exc:
            raise IoFailure(str(exc))

    # -- users ---------------------------------------------------------------

    def put_user(self, record: UserRecord) -> None:
        with self._users_lock:
            self._append_line(self._users_fh, record.to_wire())
            self._users[record.subject] = record

    def get_user(self, subject: str) -> UserRecord:
        with self._users_lock:
            record = self._users.get(subject)
        if record is None:
            raise NotFound(f"no user {subject!r}")
        return record

    def has_user(self, subject: str) -> bool:
        with self._users_lock:
            return subject in self._users

    def list_users(self) -> list[UserRecord]:
        with self._users_lock:
            return sorted(self._users.values(), key=lambda u: u.subject)

    # -- jobs ----------------------------------------------------------------

    def put_job(self, record: JobRecord) -> None:
        with self._jobs_lock:
            self._append_line(self._jobs_fh, record.to_wire())
            self._jobs[record.job_id] = record

    def get_job(self, job_id: str) -> JobRecord:
        with self._jobs_lock:
            record = self._jobs.get(job_id)
        if record is None:
            raise NotFound(f"no job {job_id!r}")
        return record

    def has_job(self, job_id: str) -> bool:
        with self._jobs_lock:
            return job_id in self._jobs

    def list_jobs(self) -> list[JobRecord]:
        with self._jobs_lock:
            return sorted(self._jobs.values(), key=lambda j: j.job_id)

    def list_jobs_by_owner(self, subject: str) -> list[JobRecord]:
        with self._jobs_lock:
            return sorted(
                (j for j in self._jobs.values() if j.owner_subject == subject),
                key=lambda j: j.job_id,
            )

    def transition_job(self, job_id: str, new_state: str) -> JobRecord:
        """Move a job through the lifecycle state machine; persists the result."""
        with self._jobs_lock:
            record = self._jobs.get(job_id)
            if record is None:
                raise NotFound(f"no job {job_id!r}")
            if new_state not in LEGAL_TRANSITIONS.get(record.state, frozenset()):
                raise IllegalTransition(
                    f"job {job_id}: {record.state} -> {new_state} is not allowed")
            updated = JobRecord(
                job_id=record.job_id, owner_subject=record.owner_subject,
                password_hash=record.password_hash, site=record.site,
                state=new_state, created_at=record.created_at)
            self._append_line(self._jobs_fh, updated.to_wire())
            self._jobs[job_id] = updated
            return updated

    # -- events ---------------------------------------------------------------

    def _event_fh(self, job_id: str) -> IO[str]:
        fh = self._event_fhs.get(job_id)
        if fh is None:
            fh = (self.root / "events" / f"{job_id}.jsonl").open("a", encoding="utf-8")
            self._event_fhs[job_id] = fh
        return fh

    def append_event(self, job_id: str, event: MonitoringEvent) -> int:
        """Append an event, assigning the next sequence number; returns it.

        The caller's ``seq`` field is ignored; the event is stored with
        seq = previous max + 1, atomically under concurrent appends.
        """
        # Job existence checked outside the events lock: lock order is always
        # users -> jobs -> events, and jobs are never deleted.
        if not self.has_job(job_id):
            raise NotFound(f"no job {job_id!r}")
        with self._events_lock:
            log = self._events.setdefault(job_id, [])
            seq = len(log) + 1
            stored = MonitoringEvent(
                job_id=job_id, seq=seq, timestamp=event.timestamp,
                kind=event.kind, done=event.done, total=event.total,
                exit_code=event.exit_code, raw=event.raw,
                file_size=event.file_size)
            self._append_line(self._event_fh(job_id), stored.to_wire())
            log.append(stored)
            return seq

    def read_events(self, job_id: str, from_seq: int = 1) -> list[MonitoringEvent]:
        if not self.has_job(job_id):
            raise NotFound(f"no job {job_id!r}")
        with self._events_lock:
            log = self._events.get(job_id, [])
            return log[max(from_seq - 1, 0):]

    # -- dumps -----------------------------------------------------------------

    def dump(self) -> dict:
        """Whole observable state as plain JSON-able data (for reports and tests)."""
        with self._users_lock, self._jobs_lock, self._events_lock:
            return {
                "users": [u.to_wire() for u in self.list_users()],
                "jobs": [j.to_wire() for j in self.list_jobs()],
                "events": {
                    job_id: [e.to_wire() for e in events]
                    for job_id, events in sorted(self._events.items())
                },
            }
