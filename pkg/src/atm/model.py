"""Domain types shared by the monitoring server, store, agent and clients.

The certificate scheme is a desk-scale stand-in for grid security
infrastructure: Ed25519 detached signatures with a single certificate
authority.  A certificate binds a subject name to a public key under the CA
key; a signed request proves possession of the subject's private key over a
specific request body.  Ed25519 signing is deterministic, so fixed key seeds
give reproducible bytes in tests.

All types serialize to canonical JSON objects with snake_case field names;
byte fields are hex-encoded.  ``to_wire`` / ``from_wire`` are the single
serialization path used by both the HTTP protocol and the on-disk store.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
import string
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import BadSignature, ExpiredCertificate, UntrustedCA

EVENT_KINDS = frozenset({
    "registered", "started", "progress", "indirect_size",
    "heartbeat", "finished", "failed",
})

JOB_STATES = ("registered", "running", "completed", "failed")

# A job may fail straight from "registered": the wrapper reports failure when
# the original executable cannot even be spawned.  Same for a finish that
# arrives without a preceding start, e.g. from a replayed spool.
LEGAL_TRANSITIONS = {
    "registered": frozenset({"running", "completed", "failed"}),
    "running": frozenset({"completed", "failed"}),
    "completed": frozenset(),
    "failed": frozenset(),
}

POLICY_MODES = ("allow_all", "allowlist", "denylist")

_CERT_CONTEXT = b"atm-certificate-v1"
_TICKET_ALPHABET = string.ascii_lowercase + string.digits
_PASSWORD_ALPHABET = string.ascii_letters + string.digits
PASSWORD_LENGTH = 24
_PBKDF2_ITERATIONS = 5000


# ---------------------------------------------------------------------------
# Keys and certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    private_key: bytes  # 32-byte Ed25519 seed
    public_key: bytes   # 32-byte Ed25519 public key


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Generate an Ed25519 key pair; a fixed 32-byte seed gives a fixed pair."""
    if seed is None:
        seed = os.urandom(32)
    if len(seed) != 32:
        seed = hashlib.sha256(seed).digest()
    private = Ed25519PrivateKey.from_private_bytes(seed)
    public = private.public_key().public_bytes_raw()
    return KeyPair(private_key=seed, public_key=public)


def _sign(private_key: bytes, payload: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_key).sign(payload)


def _verify(public_key: bytes, signature: bytes, payload: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def _cert_payload(subject: str, public_key: bytes, not_after: float) -> bytes:
    subject_bytes = subject.encode("utf-8")
    return b"".join([
        _CERT_CONTEXT,
        len(subject_bytes).to_bytes(4, "big"), subject_bytes,
        len(public_key).to_bytes(4, "big"), public_key,
        int(not_after).to_bytes(8, "big"),
    ])


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: bytes
    ca_signature: bytes
    not_after: float

    def to_wire(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "public_key": self.public_key.hex(),
            "ca_signature": self.ca_signature.hex(),
            "not_after": self.not_after,
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "Certificate":
        return cls(
            subject=obj["subject"],
            public_key=bytes.fromhex(obj["public_key"]),
            ca_signature=bytes.fromhex(obj["ca_signature"]),
            not_after=float(obj["not_after"]),
        )


class CertificateAuthority:
    """The single test CA: issues certificates and publishes its verification key."""

    def __init__(self, keypair: Optional[KeyPair] = None):
        self.keypair = keypair or generate_keypair()

    @property
    def verification_key(self) -> bytes:
        return self.keypair.public_key

    def issue(self, subject: str, public_key: bytes,
              lifetime_seconds: float = 365 * 24 * 3600.0,
              now: Optional[float] = None) -> Certificate:
        not_after = (time.time() if now is None else now) + lifetime_seconds
        signature = _sign(self.keypair.private_key,
                          _cert_payload(subject, public_key, not_after))
        return Certificate(subject=subject, public_key=public_key,
                           ca_signature=signature, not_after=not_after)


def verify_certificate(cert: Certificate, ca_verification_key: bytes,
                       now: Optional[float] = None) -> None:
    payload = _cert_payload(cert.subject, cert.public_key, cert.not_after)
    if not _verify(ca_verification_key, cert.ca_signature, payload):
        raise UntrustedCA(f"certificate for {cert.subject!r} not signed by the trusted CA")
    if cert.not_after <= (time.time() if now is None else now):
        raise ExpiredCertificate(f"certificate for {cert.subject!r} has expired")


@dataclass(frozen=True)
class SignedRequest:
    body: bytes
    subject: str
    signature: bytes
    certificate: Certificate

    def to_wire(self) -> dict[str, Any]:
        return {
            "body": self.body.hex(),
            "subject": self.subject,
            "signature": self.signature.hex(),
            "certificate": self.certificate.to_wire(),
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "SignedRequest":
        return cls(
            body=bytes.fromhex(obj["body"]),
            subject=obj["subject"],
            signature=bytes.fromhex(obj["signature"]),
            certificate=Certificate.from_wire(obj["certificate"]),
        )


def sign_request(body: bytes, private_key: bytes, certificate: Certificate) -> SignedRequest:
    return SignedRequest(
        body=body,
        subject=certificate.subject,
        signature=_sign(private_key, body),
        certificate=certificate,
    )


def verify_request(req: SignedRequest, ca_verification_key: bytes,
                   now: Optional[float] = None) -> str:
    """Check certificate chain and body signature; return the proven subject."""
    verify_certificate(req.certificate, ca_verification_key, now=now)
    if req.certificate.subject != req.subject:
        raise BadSignature("request subject does not match certificate subject")
    if not _verify(req.certificate.public_key, req.signature, req.body):
        raise BadSignature("request body signature does not verify")
    return req.subject


# ---------------------------------------------------------------------------
# Tickets and passwords
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JobTicket:
    job_id: str
    password: str
    atm_url: str
    site: str

    def to_wire(self) -> dict[str, Any]:
        return {"job_id": self.job_id, "password": self.password,
                "atm_url": self.atm_url, "site": self.site}

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "JobTicket":
        return cls(job_id=obj["job_id"], password=obj["password"],
                   atm_url=obj["atm_url"], site=obj["site"])


def issue_ticket(atm_url: str, site: str, rng: random.Random) -> JobTicket:
    """Mint a fresh job credential; a seeded rng reproduces the same stream."""
    job_id = "j" + "".join(rng.choices(_TICKET_ALPHABET, k=20))
    password = "".join(rng.choices(_PASSWORD_ALPHABET, k=PASSWORD_LENGTH))
    return JobTicket(job_id=job_id, password=password, atm_url=atm_url, site=site)


def hash_password(password: str, salt: Optional[bytes] = None,
                  iterations: int = _PBKDF2_ITERATIONS) -> str:
    """Salted PBKDF2 digest, encoded as pbkdf2$<iters>$<salt>$<hash>."""
    if salt is None:
        salt = os.urandom(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"pbkdf2${iterations}${salt.hex()}${digest.hex()}"


def check_password(password: str, digest: str) -> bool:
    try:
        scheme, iterations, salt_hex, hash_hex = digest.split("$")
        if scheme != "pbkdf2":
            return False
        recomputed = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"),
            bytes.fromhex(salt_hex), int(iterations))
    except (ValueError, TypeError):
        return False
    return hmac.compare_digest(recomputed.hex(), hash_hex)


# ---------------------------------------------------------------------------
# Events and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonitoringEvent:
    """One status datum for a job; ``seq`` is assigned by the store on append."""

    job_id: str
    seq: int
    timestamp: float
    kind: str
    done: Optional[int] = None
    total: Optional[int] = None
    exit_code: Optional[int] = None
    raw: Optional[str] = None
    file_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "progress":
            if self.done is None or self.total is None:
                raise ValueError("progress event requires done and total")
            if not (0 <= self.done <= self.total):
                raise ValueError(f"progress requires 0 <= done <= total, got {self.done}/{self.total}")
        if self.kind == "finished" and self.exit_code is None:
            raise ValueError("finished event requires exit_code")
        if self.kind == "indirect_size" and self.file_size is None:
            raise ValueError("indirect_size event requires file_size")

    @property
    def progress(self) -> Optional[tuple[int, int]]:
        if self.done is None or self.total is None:
            return None
        return (self.done, self.total)

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "job_id": self.job_id, "seq": self.seq,
            "timestamp": self.timestamp, "kind": self.kind,
        }
        for name in ("done", "total", "exit_code", "raw", "file_size"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "MonitoringEvent":
        return cls(
            job_id=obj["job_id"], seq=int(obj["seq"]),
            timestamp=float(obj["timestamp"]), kind=obj["kind"],
            done=obj.get("done"), total=obj.get("total"),
            exit_code=obj.get("exit_code"), raw=obj.get("raw"),
            file_size=obj.get("file_size"),
        )


@dataclass(frozen=True)
class UserRecord:
    subject: str
    max_jobs: int
    registered_at: float
    active_jobs: int = 0

    def __post_init__(self):
        if self.max_jobs < 1:
            raise ValueError("max_jobs must be positive")
        if not (0 <= self.active_jobs <= self.max_jobs):
            raise ValueError("active_jobs must lie in [0, max_jobs]")

    def to_wire(self) -> dict[str, Any]:
        return {"subject": self.subject, "max_jobs": self.max_jobs,
                "registered_at": self.registered_at, "active_jobs": self.active_jobs}

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "UserRecord":
        return cls(subject=obj["subject"], max_jobs=int(obj["max_jobs"]),
                   registered_at=float(obj["registered_at"]),
                   active_jobs=int(obj["active_jobs"]))


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    owner_subject: str
    password_hash: str
    site: str
    state: str
    created_at: float

    def __post_init__(self):
        if self.state not in JOB_STATES:
            raise ValueError(f"unknown job state {self.state!r}")

    def to_wire(self) -> dict[str, Any]:
        return {"job_id": self.job_id, "owner_subject": self.owner_subject,
                "password_hash": self.password_hash, "site": self.site,
                "state": self.state, "created_at": self.created_at}

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "JobRecord":
        return cls(job_id=obj["job_id"], owner_subject=obj["owner_subject"],
                   password_hash=obj["password_hash"], site=obj["site"],
                   state=obj["state"], created_at=float(obj["created_at"]))


@dataclass(frozen=True)
class SitePolicy:
    mode: str = "allow_all"
    subjects: frozenset[str] = field(default_factory=frozenset)
    default_max_jobs: int = 100

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode in ("allowlist", "denylist") and not self.subjects:
            raise ValueError(f"{self.mode} policy requires a non-empty subjects set")
        if self.default_max_jobs < 1:
            raise ValueError("default_max_jobs must be positive")

    def admits(self, subject: str) -> bool:
        if self.mode == "allow_all":
            return True
        if self.mode == "allowlist":
            return subject in self.subjects
        return subject not in self.subjects

    def to_wire(self) -> dict[str, Any]:
        return {"mode": self.mode, "subjects": sorted(self.subjects),
                "default_max_jobs": self.default_max_jobs}

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "SitePolicy":
        return cls(mode=obj.get("mode", "allow_all"),
                   subjects=frozenset(obj.get("subjects", ())),
                   default_max_jobs=int(obj.get("default_max_jobs", 100)))
