"""Connection auditing: every socket the stack opens or binds is recordable.

When auditing is enabled (via ``configure`` in-process, or the ATM_AUDIT_LOG /
ATM_AUDIT_ROLE environment variables for subprocesses), each connect and each
listening bind appends one JSON line to the audit log.  The pipeline simulator
points every component at one shared log file and later resolves target ports
to component roles, which is what lets it prove the outbound-only property:
worker nodes dial out to the monitoring server and nothing ever dials in.

Appends use a single write on a file opened with O_APPEND, so records from
concurrent processes do not interleave.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from http.client import HTTPConnection
from pathlib import Path
from typing import Optional

AUDIT_LOG_ENV = "ATM_AUDIT_LOG"
AUDIT_ROLE_ENV = "ATM_AUDIT_ROLE"

_configured_path: Optional[str] = None
_configured_role: Optional[str] = None


@dataclass(frozen=True)
class SocketRecord:
    """One observed socket action: kind is "connect" or "listen"."""

    kind: str
    role: str
    host: str
    port: int
    timestamp: float

    def to_wire(self) -> dict:
        return {"kind": self.kind, "role": self.role, "host": self.host,
                "port": self.port, "timestamp": self.timestamp}

    @classmethod
    def from_wire(cls, obj: dict) -> "SocketRecord":
        return cls(kind=obj["kind"], role=obj["role"], host=obj["host"],
                   port=int(obj["port"]), timestamp=float(obj["timestamp"]))


def configure(path: Optional[str], role: Optional[str] = None) -> None:
    """Enable (or disable, with None) audit logging for this process."""
    global _configured_path, _configured_role
    _configured_path = path
    _configured_role = role


def _log_path() -> Optional[str]:
    return _configured_path or os.environ.get(AUDIT_LOG_ENV)


def _default_role() -> str:
    return _configured_role or os.environ.get(AUDIT_ROLE_ENV) or "unknown"


def _record(kind: str, host: str, port: int, role: Optional[str]) -> None:
    path = _log_path()
    if not path:
        return
    record = SocketRecord(kind=kind, role=role or _default_role(),
                          host=host, port=port, timestamp=time.time())
    line = (json.dumps(record.to_wire(), sort_keys=True) + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def note_connect(host: str, port: int, role: Optional[str] = None) -> None:
    _record("connect", host, port, role)


def note_listen(host: str, port: int, role: Optional[str] = None) -> None:
    _record("listen", host, port, role)


def open_http_connection(host: str, port: int, role: Optional[str] = None,
                         timeout: Optional[float] = None) -> HTTPConnection:
    """The audited dialer: records the connect, then returns a plain connection."""
    note_connect(host, port, role)
    return HTTPConnection(host, port, timeout=timeout)


def read_log(path: str | Path) -> list[SocketRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(SocketRecord.from_wire(json.loads(line)))
    return records
