"""The ATM server: registration, ticket issuance, update ingestion, queries.

``AtmServer`` is the transport-free core: it owns a store, enforces the site
policy and per-user quotas, and raises the typed errors from
:mod:`atm.errors`.  ``AtmHttpServer`` exposes it over HTTP/1.1 with canonical
JSON bodies:

    POST /api/v1/user/register   signed request -> {accepted, max_jobs}
    POST /api/v1/job/register    signed request {site} -> job ticket
    POST /api/v1/job/update      {job_id, password, event} -> {seq}
    GET  /api/v1/job/status?job_id=..&password=..  -> {jobs: [...]}
    POST /api/v1/job/query       signed request -> {jobs: [...]}
    GET  /api/v1/healthz         -> {server_id}

Error bodies are {code, message}; status codes: 401 auth/signature failures,
403 policy rejection, 404 unknown object, 409 quota or lifecycle conflicts.

Authentication is asymmetric by design: monitoring updates need only the job
ticket (worker nodes hold no user keys), while queries accept either the
ticket or a request signed with the owner's certificate.  Update failures are
reported uniformly as auth_failed so callers cannot probe for job ids.  The
server never opens outbound connections; it only accepts.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional
from urllib.parse import parse_qs, urlparse

from . import netaudit
from .errors import (
    AtmError,
    AuthFailed,
    InvalidRequest,
    NotFound,
    NotRegistered,
    PolicyRejected,
    QuotaExceeded,
)
from .model import (
    JobRecord,
    JobTicket,
    MonitoringEvent,
    SignedRequest,
    SitePolicy,
    UserRecord,
    check_password,
    hash_password,
    issue_ticket,
    verify_request,
)
from .store import Store

log = logging.getLogger("atm.server")


@dataclass
class ServerConfig:
    listen_address: str = "127.0.0.1:0"
    policy: SitePolicy = field(default_factory=SitePolicy)
    store_root: str = "atm-store"
    ca_verification_key: bytes = b""
    server_id: str = "atm-1"
    ticket_seed: Optional[int] = None
    fsync_on_append: bool = True
    # Deliberately reproduces the legacy single-shared-password deployment so
    # the simulator can demonstrate why per-job tickets exist.  Never set in
    # normal operation.
    legacy_shared_password: Optional[str] = None

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "ServerConfig":
        return cls(
            listen_address=obj.get("listen_address", "127.0.0.1:0"),
            policy=SitePolicy.from_wire(obj.get("policy", {})),
            store_root=obj.get("store_root", "atm-store"),
            ca_verification_key=bytes.fromhex(obj.get("ca_verification_key", "")),
            server_id=obj.get("server_id", "atm-1"),
            ticket_seed=obj.get("ticket_seed"),
            fsync_on_append=obj.get("fsync_on_append", True),
            legacy_shared_password=obj.get("legacy_shared_password"),
        )


class AtmServer:
    """Request handling core, independent of any transport."""

    def __init__(self, config: ServerConfig, store: Store):
        self.config = config
        self.store = store
        self._rng = random.Random(config.ticket_seed)
        self._register_lock = threading.Lock()
        self.base_url = ""  # filled in by the HTTP layer once bound

    # -- helpers --------------------------------------------------------------

    def _verify(self, signed: SignedRequest, expected_action: str) -> tuple[str, dict]:
        subject = verify_request(signed, self.config.ca_verification_key)
        try:
            body = json.loads(signed.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise InvalidRequest("signed body is not valid JSON")
        if body.get("action") != expected_action:
            raise InvalidRequest(
                f"signed body action {body.get('action')!r} does not match endpoint")
        return subject, body

    def _mint_password(self) -> str:
        if self.config.legacy_shared_password is not None:
            return self.config.legacy_shared_password
        return issue_ticket("", "", self._rng).password

    # -- operations -----------------------------------------------------------

    def register_user(self, signed: SignedRequest) -> UserRecord:
        """Register (idempotently) the proven subject under the site policy."""
        subject, _ = self._verify(signed, "user_register")
        if not self.config.policy.admits(subject):
            raise PolicyRejected(f"site policy rejects {subject!r}")
        with self._register_lock:
            if self.store.has_user(subject):
                return self.store.get_user(subject)
            record = UserRecord(
                subject=subject,
                max_jobs=self.config.policy.default_max_jobs,
                registered_at=time.time(),
                active_jobs=0,
            )
            self.store.put_user(record)
            log.info("registered user %s (max_jobs=%d)", subject, record.max_jobs)
            return record

    def register_job(self, signed: SignedRequest) -> JobTicket:
        """Admit one job for a registered user and mint its ticket.

        The ticket password is returned exactly once and persisted only as a
        salted hash.
        """
        subject, body = self._verify(signed, "job_register")
        site = body.get("site")
        if not site or not isinstance(site, str):
            raise InvalidRequest("job_register body requires a site")
        with self._register_lock:
            if not self.store.has_user(subject):
                raise NotRegistered(f"{subject!r} is not registered on this server")
            user = self.store.get_user(subject)
            if user.active_jobs >= user.max_jobs:
                raise QuotaExceeded(
                    f"{subject!r} already has {user.active_jobs} active jobs")
            ticket = issue_ticket(self.base_url, site, self._rng)
            while self.store.has_job(ticket.job_id):
                ticket = issue_ticket(self.base_url, site, self._rng)
            if self.config.legacy_shared_password is not None:
                ticket = JobTicket(job_id=ticket.job_id,
                                   password=self.config.legacy_shared_password,
                                   atm_url=ticket.atm_url, site=ticket.site)
            salt = self._rng.getrandbits(128).to_bytes(16, "big")
            record = JobRecord(
                job_id=ticket.job_id,
                owner_subject=subject,
                password_hash=hash_password(ticket.password, salt=salt),
                site=site,
                state="registered",
                created_at=time.time(),
            )
            self.store.put_job(record)
            self.store.put_user(UserRecord(
                subject=user.subject, max_jobs=user.max_jobs,
                registered_at=user.registered_at,
                active_jobs=user.active_jobs + 1))
            self.store.append_event(ticket.job_id, MonitoringEvent(
                job_id=ticket.job_id, seq=0, timestamp=time.time(),
                kind="registered"))
            log.info("registered job %s for %s at site %s",
                     ticket.job_id, subject, site)
            return ticket

    def _authenticate_ticket(self, job_id: str, password: str) -> JobRecord:
        # Unknown id and wrong password fail identically.
        try:
            record = self.store.get_job(job_id)
        except NotFound:
            raise AuthFailed("job credentials rejected")
        if not check_password(password, record.password_hash):
            raise AuthFailed("job credentials rejected")
        return record

    def _release_quota(self, owner_subject: str) -> None:
        with self._register_lock:
            user = self.store.get_user(owner_subject)
            if user.active_jobs > 0:
                self.store.put_user(UserRecord(
                    subject=user.subject, max_jobs=user.max_jobs,
                    registered_at=user.registered_at,
                    active_jobs=user.active_jobs - 1))

    def record_update(self, job_id: str, password: str, event_fields: dict[str, Any]) -> int:
        """Ingest one monitoring event; lifecycle events drive the job state."""
        record = self._authenticate_ticket(job_id, password)
        try:
            event = MonitoringEvent(
                job_id=job_id, seq=0,
                timestamp=float(event_fields.get("timestamp", time.time())),
                kind=event_fields.get("kind", ""),
                done=event_fields.get("done"), total=event_fields.get("total"),
                exit_code=event_fields.get("exit_code"),
                raw=event_fields.get("raw"),
                file_size=event_fields.get("file_size"),
            )
        except (ValueError, TypeError) as exc:
            raise InvalidRequest(f"malformed event: {exc}")
        seq = self.store.append_event(job_id, event)

        if event.kind == "started" and record.state == "registered":
            self.store.transition_job(job_id, "running")
        elif event.kind in ("finished", "failed"):
            current = self.store.get_job(job_id).state
            if current in ("registered", "running"):
                target = "completed" if event.kind == "finished" else "failed"
                self.store.transition_job(job_id, target)
                self._release_quota(record.owner_subject)
        return seq

    def _job_status(self, record: JobRecord) -> dict[str, Any]:
        wire = record.to_wire()
        del wire["password_hash"]  # digests stay server-side
        return {
            "record": wire,
            "events": [e.to_wire() for e in self.store.read_events(record.job_id)],
        }

    def query_by_ticket(self, job_id: str, password: str) -> list[dict[str, Any]]:
        """Ticket credentials see exactly the one job they belong to."""
        record = self._authenticate_ticket(job_id, password)
        return [self._job_status(record)]

    def query_by_certificate(self, signed: SignedRequest) -> list[dict[str, Any]]:
        """Certificate credentials see all and only the subject's own jobs."""
        subject, _ = self._verify(signed, "job_query")
        return [self._job_status(r) for r in self.store.list_jobs_by_owner(subject)]


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def _signed_request_from_wire(payload: dict[str, Any]) -> SignedRequest:
    try:
        return SignedRequest.from_wire(payload)
    except (KeyError, ValueError, TypeError):
        raise InvalidRequest("malformed signed request envelope")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    atm: AtmServer  # set on the subclass by AtmHttpServer

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        log.debug("%s - %s", self.address_string(), format % args)

    def _send_json(self, status: int, obj: dict[str, Any]) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, exc: AtmError) -> None:
        self._send_json(exc.http_status, {"code": exc.code, "message": exc.message})

    def _read_json(self) -> dict[str, Any]:
        length = int(self.headers.get("Content-Length", "0"))
        if length <= 0:
            raise InvalidRequest("request body required")
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError:
            raise InvalidRequest("request body is not valid JSON")

    def do_GET(self):  # noqa: N802 - stdlib naming
        try:
            url = urlparse(self.path)
            if url.path == "/api/v1/healthz":
                self._send_json(200, {"server_id": self.atm.config.server_id})
            elif url.path == "/api/v1/job/status":
                params = parse_qs(url.query)
                job_id = params.get("job_id", [""])[0]
                password = params.get("password", [""])[0]
                if not job_id or not password:
                    raise InvalidRequest("job_id and password query parameters required")
                jobs = self.atm.query_by_ticket(job_id, password)
                self._send_json(200, {"jobs": jobs})
            else:
                raise NotFound(f"no such endpoint {url.path}")
        except AtmError as exc:
            self._send_error(exc)
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("unhandled error")
            self._send_error(AtmError(str(exc)))

    def do_POST(self):  # noqa: N802 - stdlib naming
        try:
            url = urlparse(self.path)
            payload = self._read_json()
            if url.path == "/api/v1/user/register":
                record = self.atm.register_user(_signed_request_from_wire(payload))
                self._send_json(200, {"accepted": True, "max_jobs": record.max_jobs})
            elif url.path == "/api/v1/job/register":
                ticket = self.atm.register_job(_signed_request_from_wire(payload))
                self._send_json(200, ticket.to_wire())
            elif url.path == "/api/v1/job/update":
                for key in ("job_id", "password", "event"):
                    if key not in payload:
                        raise InvalidRequest(f"update requires {key}")
                seq = self.atm.record_update(
                    payload["job_id"], payload["password"], payload["event"])
                self._send_json(200, {"seq": seq})
            elif url.path == "/api/v1/job/query":
                jobs = self.atm.query_by_certificate(_signed_request_from_wire(payload))
                self._send_json(200, {"jobs": jobs})
            else:
                raise NotFound(f"no such endpoint {url.path}")
        except AtmError as exc:
            self._send_error(exc)
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("unhandled error")
            self._send_error(AtmError(str(exc)))


class AtmHttpServer:
    """Threaded HTTP front end around an AtmServer core."""

    def __init__(self, config: ServerConfig, store: Store):
        self.atm = AtmServer(config, store)
        host, port = config.host_port()
        handler = type("BoundHandler", (_Handler,), {"atm": self.atm})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self.host = self._httpd.server_address[0]
        self.port = self._httpd.server_address[1]
        self.atm.base_url = f"http://{self.host}:{self.port}"
        self._thread: Optional[threading.Thread] = None
        netaudit.note_listen(self.host, self.port, role="ATM")

    @property
    def url(self) -> str:
        return self.atm.base_url

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05},
            name=f"atm-http-{self.atm.config.server_id}", daemon=True)
        self._thread.start()
        log.info("server %s listening on %s",
                 self.atm.config.server_id, self.url)

    def serve_forever(self) -> None:
        log.info("server %s listening on %s",
                 self.atm.config.server_id, self.url)
        self._httpd.serve_forever(poll_interval=0.1)

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
