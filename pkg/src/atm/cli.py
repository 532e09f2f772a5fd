"""Command-line tools: server, registration, submission prep, status, wrapper, sim.

Exit codes are uniform across tools:

    0  success
    2  usage or input error
    3  rejected by site policy (or not registered)
    4  job quota exceeded
    5  authentication or signature failure
    6  server unreachable

All tools accept the ATM_URL environment variable as the default for --atm.
Job passwords never appear on standard output or standard error; they travel
only inside rewritten JDL files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import agent, gridsim, jdl
from .client import AtmClient
from .errors import (
    AtmError,
    AuthFailed,
    BadSignature,
    ExpiredCertificate,
    NotRegistered,
    PolicyRejected,
    QuotaExceeded,
    TransportError,
    UntrustedCA,
)
from .model import Certificate, CertificateAuthority, KeyPair, generate_keypair
from .server import AtmHttpServer, ServerConfig
from .store import Store

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_POLICY = 3
EXIT_QUOTA = 4
EXIT_AUTH = 5
EXIT_TRANSPORT = 6


def _exit_code_for(exc: AtmError) -> int:
    if isinstance(exc, (PolicyRejected, NotRegistered)):
        return EXIT_POLICY
    if isinstance(exc, QuotaExceeded):
        return EXIT_QUOTA
    if isinstance(exc, (AuthFailed, BadSignature, UntrustedCA, ExpiredCertificate)):
        return EXIT_AUTH
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    return EXIT_USAGE


def _default_atm(value: Optional[str]) -> str:
    url = value or os.environ.get("ATM_URL")
    if not url:
        print("error: --atm URL required (or set ATM_URL)", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return url


def _load_cert(path: str) -> Certificate:
    return Certificate.from_wire(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_key(path: str) -> bytes:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return bytes.fromhex(obj["private_key"])


def _fail(exc: AtmError) -> int:
    print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
    return _exit_code_for(exc)


# ---------------------------------------------------------------------------
# atm-user-register
# ---------------------------------------------------------------------------

def user_register_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-user-register",
        description="Register this identity on a monitoring server.")
    parser.add_argument("--atm", help="server URL (default: ATM_URL)")
    parser.add_argument("--cert", required=True, help="certificate JSON file")
    parser.add_argument("--key", required=True, help="private key JSON file")
    args = parser.parse_args(argv)
    try:
        client = AtmClient(_default_atm(args.atm), role="UI")
        result = client.user_register(_load_key(args.key), _load_cert(args.cert))
    except AtmError as exc:
        return _fail(exc)
    print(f"accepted, max_jobs={result['max_jobs']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# atm-job-register
# ---------------------------------------------------------------------------

def job_register_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-job-register",
        description="Obtain a job ticket and write the monitoring-wrapped JDL.")
    parser.add_argument("--atm", help="server URL (default: ATM_URL)")
    parser.add_argument("--cert", required=True)
    parser.add_argument("--key", required=True)
    parser.add_argument("--site", required=True, help="target computing element")
    parser.add_argument("--jdl", required=True, help="input JDL file")
    parser.add_argument("--out", required=True, help="rewritten JDL output file")
    parser.add_argument("--retry", type=int, default=jdl.DEFAULT_RETRY_COUNT,
                        help="monitoring update period in seconds")
    args = parser.parse_args(argv)

    try:
        original = jdl.parse_jdl(Path(args.jdl).read_text(encoding="utf-8"))
    except (OSError, jdl.JdlError) as exc:
        print(f"error: cannot read JDL: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        client = AtmClient(_default_atm(args.atm), role="UI")
        ticket = client.job_register(_load_key(args.key), _load_cert(args.cert),
                                     site=args.site)
    except AtmError as exc:
        return _fail(exc)

    try:
        rewritten = jdl.rewrite_for_monitoring(original, jdl.RewriteParams(
            job_id=ticket.job_id, password=ticket.password,
            site=ticket.site, atm_url=ticket.atm_url, retry_count=args.retry))
    except jdl.JdlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    Path(args.out).write_text(jdl.render_jdl(rewritten), encoding="utf-8")
    print(ticket.job_id)
    return EXIT_OK


# ---------------------------------------------------------------------------
# atm-job-status
# ---------------------------------------------------------------------------

def _format_timestamp(ts: Optional[float]) -> str:
    if ts is None:
        return "-"
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


def _status_rows(jobs: list[dict[str, Any]]) -> list[dict[str, Any]]:
    rows = []
    for entry in jobs:
        record = entry["record"]
        events = entry["events"]
        progress = next((e for e in reversed(events) if e["kind"] == "progress"), None)
        rows.append({
            "job_id": record["job_id"],
            "state": record["state"],
            "site": record["site"],
            "progress": (f"{progress['done']}/{progress['total']}"
                         if progress else "-"),
            "last_event": _format_timestamp(
                events[-1]["timestamp"] if events else None),
        })
    return rows


def job_status_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-job-status",
        description="Show job state and latest progress from a monitoring server.")
    parser.add_argument("--atm", help="server URL (default: ATM_URL)")
    parser.add_argument("--job", help="job id (ticket mode)")
    parser.add_argument("--password", help="job password (ticket mode)")
    parser.add_argument("--cert", help="certificate JSON file (owner mode)")
    parser.add_argument("--key", help="private key JSON file (owner mode)")
    parser.add_argument("--all", action="store_true",
                        help="owner mode: include full event streams in JSON output")
    parser.add_argument("--format", choices=("table", "json"), default="table")
    args = parser.parse_args(argv)

    ticket_mode = bool(args.job or args.password)
    cert_mode = bool(args.cert or args.key)
    if ticket_mode == cert_mode:
        parser.error("use either --job/--password or --cert/--key")
    if ticket_mode and not (args.job and args.password):
        parser.error("ticket mode needs both --job and --password")
    if cert_mode and not (args.cert and args.key):
        parser.error("owner mode needs both --cert and --key")

    try:
        client = AtmClient(_default_atm(args.atm), role="UI")
        if ticket_mode:
            jobs = client.job_status(args.job, args.password)
        else:
            jobs = client.job_query(_load_key(args.key), _load_cert(args.cert))
    except AtmError as exc:
        return _fail(exc)

    if args.format == "json":
        payload = jobs if args.all else _status_rows(jobs)
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK

    rows = _status_rows(jobs)
    if not rows:
        print("no jobs")
        return EXIT_OK
    header = f"{'JOB':24} {'STATE':10} {'SITE':16} {'PROGRESS':10} LAST EVENT (UTC)"
    print(header)
    for row in rows:
        print(f"{row['job_id']:24} {row['state']:10} {row['site']:16} "
              f"{row['progress']:10} {row['last_event']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# atm-server
# ---------------------------------------------------------------------------

SAMPLE_CONFIG = {
    "listen_address": "127.0.0.1:8801",
    "server_id": "atm-1",
    "store_root": "/var/lib/atm/store",
    "ca_verification_key": "<hex-encoded CA public key, see atm-ca init>",
    "policy": {
        "mode": "allow_all",
        "subjects": [],
        "default_max_jobs": 100,
    },
    "fsync_on_append": True,
}


def server_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-server", description="Run a monitoring server.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--sample-config", action="store_true",
                        help="print a sample config and exit")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    if args.sample_config:
        print(json.dumps(SAMPLE_CONFIG, indent=2))
        return EXIT_OK
    if not args.config:
        parser.error("--config required")

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    try:
        config = ServerConfig.from_wire(
            json.loads(Path(args.config).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    store = Store(config.store_root, fsync_on_append=config.fsync_on_append)
    httpd = AtmHttpServer(config, store)
    print(f"listening on {httpd.url} as {config.server_id}", flush=True)

    def _terminate(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _terminate)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.shutdown()
        store.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# atm-wrapper
# ---------------------------------------------------------------------------

def wrapper_main(argv: Optional[list[str]] = None) -> int:
    """Invocation: atm-wrapper -id=I -password=P -site=S -atm=URL [-retry=SEC]
    [-stdout=F] [-stderr=F] [-watch=F] -- command [args...]
    """
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = agent.WrapperArgs.from_argv(argv)
    except agent.WrapperArgsError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return agent.run_wrapped(args)
    except agent.SpawnFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 127


# ---------------------------------------------------------------------------
# atm-sim
# ---------------------------------------------------------------------------

def sim_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-sim", description="Run a desk-scale pipeline scenario.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario file")
    run.add_argument("scenario", help="scenario JSON file")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--report", help="write the full report JSON here")
    run.add_argument("--workdir", default=None,
                     help="working directory (default: a fresh temp dir)")
    args = parser.parse_args(argv)

    workdir = args.workdir or tempfile.mkdtemp(prefix="atm-sim-")
    try:
        report = gridsim.run_scenario_file(
            args.scenario, workdir=workdir, seed=args.seed)
    except (gridsim.ScenarioTimeout, gridsim.ValidationFailed,
            gridsim.UnknownSite) as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return 1

    finished = sum(1 for o in report.outcomes if o["state"] == "finished")
    print(f"scenario {report.name}: {finished}/{len(report.outcomes)} jobs finished "
          f"in {report.elapsed_seconds:.1f}s")
    print(f"outbound-only violations: {len(report.outbound_violations)}")
    print(f"credential violations: {len(report.credential_violations)}")
    for violation in report.outbound_violations + report.credential_violations:
        print(f"  {violation}")
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_wire(), indent=2, sort_keys=True),
            encoding="utf-8")
        print(f"report written to {args.report}")
    ok = (finished == len(report.outcomes)
          and not report.outbound_violations
          and not report.credential_violations)
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# atm-ca: mock certificate plumbing
# ---------------------------------------------------------------------------

def ca_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="atm-ca", description="Manage the mock certificate authority.")
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init", help="create a CA key pair")
    init.add_argument("--dir", required=True, help="directory for ca.json")

    issue = sub.add_parser("issue", help="issue a user certificate")
    issue.add_argument("--ca", required=True, help="ca.json from init")
    issue.add_argument("--subject", required=True)
    issue.add_argument("--out-cert", required=True)
    issue.add_argument("--out-key", required=True)
    issue.add_argument("--days", type=float, default=365.0)

    args = parser.parse_args(argv)

    if args.command == "init":
        keypair = generate_keypair()
        path = Path(args.dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "ca.json").write_text(json.dumps({
            "private_key": keypair.private_key.hex(),
            "public_key": keypair.public_key.hex(),
        }, indent=2), encoding="utf-8")
        print(f"CA written to {path / 'ca.json'}")
        print(f"verification key: {keypair.public_key.hex()}")
        return EXIT_OK

    ca_obj = json.loads(Path(args.ca).read_text(encoding="utf-8"))
    ca = CertificateAuthority(KeyPair(
        private_key=bytes.fromhex(ca_obj["private_key"]),
        public_key=bytes.fromhex(ca_obj["public_key"])))
    keypair = generate_keypair()
    cert = ca.issue(args.subject, keypair.public_key,
                    lifetime_seconds=args.days * 86400.0)
    Path(args.out_cert).write_text(
        json.dumps(cert.to_wire(), indent=2), encoding="utf-8")
    Path(args.out_key).write_text(
        json.dumps({"private_key": keypair.private_key.hex()}, indent=2),
        encoding="utf-8")
    print(f"issued certificate for {args.subject}")
    return EXIT_OK


# Re-exported for the module dispatcher.
emit_main = gridsim.emit_main
