"""HTTP client for the ATM wire protocol.

Connections go through the audited dialer in :mod:`atm.netaudit`, so any
component built on this client participates in connection auditing for free.
Wire errors are raised as the same typed exceptions the server logic raises;
unreachable servers raise TransportError.
"""

from __future__ import annotations

import json
import socket
from http.client import HTTPException
from typing import Any, Optional
from urllib.parse import quote, urlparse

from . import netaudit
from .errors import TransportError, error_from_code
from .model import Certificate, JobTicket, sign_request


class AtmClient:
    def __init__(self, atm_url: str, role: Optional[str] = None, timeout: float = 10.0):
        parsed = urlparse(atm_url)
        if parsed.scheme != "http" or not parsed.hostname:
            raise ValueError(f"ATM URL must look like http://host:port, got {atm_url!r}")
        self.atm_url = atm_url.rstrip("/")
        self.host = parsed.hostname
        self.port = parsed.port or 80
        self.role = role
        self.timeout = timeout

    # -- plumbing -------------------------------------------------------------

    def _request(self, method: str, path: str,
                 payload: Optional[dict[str, Any]] = None) -> dict[str, Any]:
        body = None
        headers = {}
        if payload is not None:
            body = json.dumps(payload, sort_keys=True).encode("utf-8")
            headers["Content-Type"] = "application/json"
        try:
            conn = netaudit.open_http_connection(
                self.host, self.port, role=self.role, timeout=self.timeout)
            try:
                conn.request(method, path, body=body, headers=headers)
                response = conn.getresponse()
                raw = response.read()
                status = response.status
            finally:
                conn.close()
        except (OSError, socket.timeout, HTTPException) as exc:
            raise TransportError(f"cannot reach {self.atm_url}: {exc}")
        try:
            obj = json.loads(raw) if raw else {}
        except json.JSONDecodeError:
            raise TransportError(f"non-JSON response from {self.atm_url}")
        if status != 200:
            raise error_from_code(obj.get("code", "internal_error"),
                                  obj.get("message", f"HTTP {status}"))
        return obj

    @staticmethod
    def _signed(action: str, private_key: bytes, certificate: Certificate,
                **fields: Any) -> dict[str, Any]:
        body = dict(fields)
        body["action"] = action
        raw = json.dumps(body, sort_keys=True).encode("utf-8")
        return sign_request(raw, private_key, certificate).to_wire()

    # -- API ------------------------------------------------------------------

    def healthz(self) -> dict[str, Any]:
        return self._request("GET", "/api/v1/healthz")

    def user_register(self, private_key: bytes, certificate: Certificate) -> dict[str, Any]:
        envelope = self._signed("user_register", private_key, certificate)
        return self._request("POST", "/api/v1/user/register", envelope)

    def job_register(self, private_key: bytes, certificate: Certificate,
                     site: str) -> JobTicket:
        envelope = self._signed("job_register", private_key, certificate, site=site)
        return JobTicket.from_wire(
            self._request("POST", "/api/v1/job/register", envelope))

    def job_update(self, job_id: str, password: str,
                   event_fields: dict[str, Any]) -> int:
        obj = self._request("POST", "/api/v1/job/update", {
            "job_id": job_id, "password": password, "event": event_fields})
        return int(obj["seq"])

    def job_status(self, job_id: str, password: str) -> list[dict[str, Any]]:
        path = (f"/api/v1/job/status?job_id={quote(job_id)}"
                f"&password={quote(password)}")
        return self._request("GET", path)["jobs"]

    def job_query(self, private_key: bytes, certificate: Certificate) -> list[dict[str, Any]]:
        envelope = self._signed("job_query", private_key, certificate)
        return self._request("POST", "/api/v1/job/query", envelope)["jobs"]
