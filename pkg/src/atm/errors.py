"""Shared error types for the ATM service stack.

Every service-level error carries a stable machine-readable ``code`` (used in
wire-protocol error bodies) and the HTTP status the server maps it to.  The
client reconstructs the same exception types from ``(status, code)`` so that
callers see identical errors whether they hit the service in-process or over
HTTP.
"""

from __future__ import annotations


class AtmError(Exception):
    """Base class for service errors; subclasses pin ``code`` and ``http_status``."""

    code = "internal_error"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class InvalidRequest(AtmError):
    code = "invalid_request"
    http_status = 400


class BadSignature(AtmError):
    code = "bad_signature"
    http_status = 401


class ExpiredCertificate(AtmError):
    code = "expired_certificate"
    http_status = 401


class UntrustedCA(AtmError):
    code = "untrusted_ca"
    http_status = 401


class AuthFailed(AtmError):
    code = "auth_failed"
    http_status = 401


class PolicyRejected(AtmError):
    code = "policy_rejected"
    http_status = 403


class NotRegistered(AtmError):
    code = "not_registered"
    http_status = 403


class NotFound(AtmError):
    code = "not_found"
    http_status = 404


class QuotaExceeded(AtmError):
    code = "quota_exceeded"
    http_status = 409


class IllegalTransition(AtmError):
    code = "illegal_transition"
    http_status = 409


class IoFailure(AtmError):
    code = "io_failure"
    http_status = 500


class StoreLocked(AtmError):
    code = "store_locked"
    http_status = 500


class TransportError(AtmError):
    """Client-side only: the server could not be reached at all."""

    code = "transport_error"
    http_status = 0


_BY_CODE = {
    cls.code: cls
    for cls in (
        InvalidRequest,
        BadSignature,
        ExpiredCertificate,
        UntrustedCA,
        AuthFailed,
        PolicyRejected,
        NotRegistered,
        NotFound,
        QuotaExceeded,
        IllegalTransition,
        IoFailure,
        StoreLocked,
    )
}


def error_from_code(code: str, message: str = "") -> AtmError:
    """Rebuild the typed exception for a wire-protocol error body."""
    cls = _BY_CODE.get(code, AtmError)
    return cls(message)
