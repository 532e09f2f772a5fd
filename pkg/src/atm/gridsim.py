"""Desk-scale simulation of the submission pipeline with connection auditing.

The simulator stands up the whole chain on one machine: per-scenario users
with mock certificates, one or more monitoring servers (in-process HTTP), a
resource broker queue, computing elements with bounded concurrency slots, and
worker nodes as real subprocesses running the wrapper around small scripted
workloads.  Every socket any component opens is recorded through the audited
dialer, which is what turns "worker nodes only dial out" from a design claim
into a checkable property.

A scenario is a JSON document:

    {
      "name": "smoke",
      "seed": 7,
      "atm_servers": 2,
      "ces": [{"site": "site-a", "slots": 2}, {"site": "site-b", "slots": 2}],
      "users": 3,
      "jobs_per_user": 5,
      "retry_seconds": 1.0,
      "workload": {"total_events": 200, "step": 20, "interval_ms": 50, "exit_code": 0},
      "timeout_seconds": 60,
      "legacy_shared_password": null
    }

Users are assigned to servers round-robin by user, jobs to sites round-robin
by job.  With a fixed seed, key material, ticket streams and scheduling
assignments are all reproducible, so two runs of the same scenario produce
the same per-job outcomes and (timestamps and heartbeats aside) the same
final server state.

The report deliberately contains no ticket passwords.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import queue
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import netaudit
from .client import AtmClient
from .jdl import (
    JdlDocument,
    JdlNumber,
    JdlString,
    JdlTokenRun,
    RewriteParams,
    parse_jdl,
    render_jdl,
    rewrite_for_monitoring,
    split_wrapper_arguments,
    validate_monitoring_jdl,
)
from .model import CertificateAuthority, Certificate, JobTicket, KeyPair, generate_keypair
from .server import AtmHttpServer, ServerConfig
from .store import Store

log = logging.getLogger("atm.gridsim")

SERVICE_ROLES = ("UI", "RB", "CE", "WN", "ATM")


class ValidationFailed(Exception):
    """A submitted JDL does not satisfy the monitoring contract."""


class UnknownSite(Exception):
    """A JDL names a site with no configured computing element."""


class ScenarioTimeout(Exception):
    """The scenario deadline passed with jobs still outstanding."""


# ---------------------------------------------------------------------------
# Topology and workload
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimUser:
    subject: str
    keypair: KeyPair
    certificate: Certificate


@dataclass
class SimTopology:
    ca: CertificateAuthority
    users: list[SimUser]
    atm_servers: list[ServerConfig]
    ce_nodes: list[tuple[str, int]]  # (site, slots)
    wn_policy: bool = True           # worker nodes must not accept connections
    rb_queue: "queue.Queue" = field(default_factory=queue.Queue)

    def site_names(self) -> list[str]:
        return [site for site, _ in self.ce_nodes]


@dataclass(frozen=True)
class JobSpec:
    subject: str
    server_index: int
    site: str
    command: tuple[str, ...]
    retry_seconds: float = 1.0
    stdout_name: str = "job.out"
    stderr_name: str = "job.err"


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    atm_servers: int = 1
    ces: tuple[tuple[str, int], ...] = (("site-a", 2),)
    users: int = 1
    jobs_per_user: int = 1
    retry_seconds: float = 1.0
    workload: dict[str, Any] = field(default_factory=dict)
    timeout_seconds: float = 60.0
    legacy_shared_password: Optional[str] = None

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "Scenario":
        ces = tuple((ce["site"], int(ce.get("slots", 2))) for ce in obj.get("ces", []))
        return cls(
            name=obj.get("name", "scenario"),
            seed=int(obj.get("seed", 0)),
            atm_servers=int(obj.get("atm_servers", 1)),
            ces=ces or (("site-a", 2),),
            users=int(obj.get("users", 1)),
            jobs_per_user=int(obj.get("jobs_per_user", 1)),
            retry_seconds=float(obj.get("retry_seconds", 1.0)),
            workload=dict(obj.get("workload", {})),
            timeout_seconds=float(obj.get("timeout_seconds", 60.0)),
            legacy_shared_password=obj.get("legacy_shared_password"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        return cls.from_wire(json.loads(Path(path).read_text(encoding="utf-8")))

    def subjects(self) -> list[str]:
        return [f"/O=sim/CN=user-{i:02d}" for i in range(self.users)]

    def emitter_command(self) -> tuple[str, ...]:
        w = self.workload
        return (
            sys.executable, "-m", "atm", "emit",
            "--total", str(w.get("total_events", 200)),
            "--step", str(w.get("step", 20)),
            "--interval-ms", str(w.get("interval_ms", 50)),
            "--exit-code", str(w.get("exit_code", 0)),
        )

    def build(self, workdir: Path) -> tuple[SimTopology, list[JobSpec]]:
        ca = CertificateAuthority(generate_keypair(f"{self.seed}:ca".encode()))
        users = []
        for subject in self.subjects():
            keypair = generate_keypair(f"{self.seed}:user:{subject}".encode())
            users.append(SimUser(
                subject=subject, keypair=keypair,
                certificate=ca.issue(subject, keypair.public_key)))
        servers = []
        for i in range(self.atm_servers):
            servers.append(ServerConfig(
                listen_address="127.0.0.1:0",
                store_root=str(workdir / "stores" / f"atm-{i}"),
                ca_verification_key=ca.verification_key,
                server_id=f"atm-{i}",
                ticket_seed=int.from_bytes(f"{self.seed}:{i}".encode(), "big"),
                legacy_shared_password=self.legacy_shared_password,
            ))
        topology = SimTopology(ca=ca, users=users, atm_servers=servers,
                               ce_nodes=list(self.ces))
        jobs = []
        sites = topology.site_names()
        command = self.emitter_command()
        for u, subject in enumerate(self.subjects()):
            for j in range(self.jobs_per_user):
                jobs.append(JobSpec(
                    subject=subject,
                    server_index=u % max(self.atm_servers, 1),
                    site=sites[(u * self.jobs_per_user + j) % len(sites)],
                    command=command,
                    retry_seconds=self.retry_seconds,
                ))
        return topology, jobs


# ---------------------------------------------------------------------------
# Connection audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditedEdge:
    kind: str            # "connect" or "listen"
    initiator_role: str
    target_role: str
    target_host: str
    target_port: int
    timestamp: float

    def to_wire(self) -> dict[str, Any]:
        return {"kind": self.kind, "initiator_role": self.initiator_role,
                "target_role": self.target_role, "target_host": self.target_host,
                "target_port": self.target_port, "timestamp": self.timestamp}


@dataclass
class ConnectionAudit:
    """Role-resolved socket log for one scenario run."""

    edges: list[AuditedEdge] = field(default_factory=list)

    @classmethod
    def resolve(cls, records: list[netaudit.SocketRecord],
                port_roles: dict[tuple[str, int], str]) -> "ConnectionAudit":
        edges = []
        for record in records:
            if record.kind == "listen":
                target_role = record.role
            else:
                target_role = port_roles.get((record.host, record.port), "external")
            edges.append(AuditedEdge(
                kind=record.kind, initiator_role=record.role,
                target_role=target_role, target_host=record.host,
                target_port=record.port, timestamp=record.timestamp))
        return cls(edges=edges)

    def connects(self) -> list[AuditedEdge]:
        return [e for e in self.edges if e.kind == "connect"]

    def to_wire(self) -> list[dict[str, Any]]:
        return [e.to_wire() for e in self.edges]


def audit_outbound_only(audit: ConnectionAudit) -> list[str]:
    """Check the outbound-only rules; empty list means the property holds.

    Services (ATM, RB, CE) must never dial a worker node, and worker nodes
    may dial nothing but a monitoring server.
    """
    violations = []
    for edge in audit.connects():
        if edge.initiator_role in ("ATM", "RB", "CE") and edge.target_role == "WN":
            violations.append(
                f"{edge.initiator_role}->WN: services must not connect into worker nodes "
                f"({edge.target_host}:{edge.target_port})")
        elif edge.initiator_role == "WN" and edge.target_role != "ATM":
            violations.append(
                f"WN->{edge.target_role}: worker nodes may only dial the monitoring server "
                f"({edge.target_host}:{edge.target_port})")
    return violations


def audit_credentials(tickets: list[JobTicket]) -> list[str]:
    """Flag password reuse across jobs, the legacy deployment's defect."""
    by_password: dict[str, list[str]] = {}
    for ticket in tickets:
        by_password.setdefault(ticket.password, []).append(ticket.job_id)
    violations = []
    for job_ids in by_password.values():
        if len(job_ids) > 1:
            violations.append(
                "shared_password: jobs " + ", ".join(sorted(job_ids)) +
                " all authenticate with one password")
    return violations


# ---------------------------------------------------------------------------
# The simulator
# ---------------------------------------------------------------------------

@dataclass
class SimJobHandle:
    index: int
    spec: JobSpec
    job_id: str = ""
    server_id: str = ""
    job_dir: str = ""
    command: tuple[str, ...] = ()
    state: str = "submitted"
    wrapper_exit: Optional[int] = None
    start_ts: Optional[float] = None
    end_ts: Optional[float] = None
    done: threading.Event = field(default_factory=threading.Event)

    def outcome(self) -> dict[str, Any]:
        return {
            "index": self.index, "subject": self.spec.subject,
            "job_id": self.job_id, "server_id": self.server_id,
            "site": self.spec.site, "state": self.state,
            "wrapper_exit": self.wrapper_exit,
            "start_ts": self.start_ts, "end_ts": self.end_ts,
            "job_dir": self.job_dir, "command": list(self.command),
        }


@dataclass
class ScenarioReport:
    name: str
    seed: int
    outcomes: list[dict[str, Any]]
    audit: ConnectionAudit
    server_dumps: dict[str, dict[str, Any]]
    user_queries: dict[str, dict[str, list[str]]]  # subject -> server_id -> job_ids
    outbound_violations: list[str]
    credential_violations: list[str]
    wn_listen_records: list[dict[str, Any]]
    elapsed_seconds: float

    def to_wire(self) -> dict[str, Any]:
        return {
            "name": self.name, "seed": self.seed,
            "outcomes": self.outcomes,
            "audit": self.audit.to_wire(),
            "server_dumps": self.server_dumps,
            "user_queries": self.user_queries,
            "outbound_violations": self.outbound_violations,
            "credential_violations": self.credential_violations,
            "wn_listen_records": self.wn_listen_records,
            "elapsed_seconds": self.elapsed_seconds,
        }


def normalized_dump(dump: dict[str, Any]) -> dict[str, Any]:
    """Project a server dump onto its timing-independent content.

    Timestamps go away entirely; event streams keep only deterministic kinds
    (heartbeats and size samples depend on wall-clock interleaving) and drop
    their sequence numbers, which shift when heartbeats land between batches.
    """
    users = [{k: v for k, v in u.items() if k != "registered_at"}
             for u in dump.get("users", [])]
    jobs = [{k: v for k, v in j.items() if k != "created_at"}
            for j in dump.get("jobs", [])]
    events = {}
    for job_id, stream in dump.get("events", {}).items():
        kept = []
        for event in stream:
            if event["kind"] in ("heartbeat", "indirect_size"):
                continue
            kept.append({k: v for k, v in event.items()
                         if k not in ("timestamp", "seq")})
        events[job_id] = kept
    return {"users": users, "jobs": jobs, "events": events}


class GridSim:
    """One scenario run: servers, broker, computing elements, worker nodes."""

    def __init__(self, topology: SimTopology, workdir: str | Path,
                 audit_log: Optional[str] = None):
        self.topology = topology
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.audit_log = audit_log or str(self.workdir / "connections.jsonl")
        self.servers: list[AtmHttpServer] = []
        self.tickets: dict[str, JobTicket] = {}
        self.handles: list[SimJobHandle] = []
        self._ce_queues: dict[str, queue.Queue] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._counter = 0
        self._counter_lock = threading.Lock()
        self._procs: set[subprocess.Popen] = set()
        self._procs_lock = threading.Lock()

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        netaudit.configure(self.audit_log, role="SIM")
        for config in self.topology.atm_servers:
            server = AtmHttpServer(config, Store(config.store_root))
            server.start()
            self.servers.append(server)
        rb = threading.Thread(target=self._rb_loop, name="sim-rb", daemon=True)
        rb.start()
        self._threads.append(rb)
        for site, slots in self.topology.ce_nodes:
            self._ce_queues[site] = queue.Queue()
            for slot in range(slots):
                worker = threading.Thread(
                    target=self._ce_loop, args=(site,),
                    name=f"sim-ce-{site}-{slot}", daemon=True)
                worker.start()
                self._threads.append(worker)

    def stop(self) -> None:
        self._stop.set()
        self.topology.rb_queue.put(None)
        for site, slots in self.topology.ce_nodes:
            for _ in range(slots):
                self._ce_queues[site].put(None)
        with self._procs_lock:
            leftovers = list(self._procs)
        for proc in leftovers:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
        for thread in self._threads:
            thread.join(timeout=5)
        for server in self.servers:
            server.shutdown()
            server.atm.store.close()
        netaudit.configure(None)

    def server_url(self, index: int) -> str:
        return self.servers[index].url

    # -- submission path --------------------------------------------------------

    def user_for(self, subject: str) -> SimUser:
        for user in self.topology.users:
            if user.subject == subject:
                return user
        raise KeyError(subject)

    def register_and_wrap(self, spec: JobSpec) -> str:
        """UI side: register user and job, rewrite the JDL; returns JDL text."""
        user = self.user_for(spec.subject)
        client = AtmClient(self.server_url(spec.server_index), role="UI")
        client.user_register(user.keypair.private_key, user.certificate)
        ticket = client.job_register(
            user.keypair.private_key, user.certificate, site=spec.site)
        self.tickets[ticket.job_id] = ticket

        original = JdlDocument((
            ("Executable", JdlString(spec.command[0])),
            ("StdOutput", JdlString(spec.stdout_name)),
            ("StdError", JdlString(spec.stderr_name)),
            ("Arguments", JdlTokenRun(tuple(spec.command[1:]))),
        ))
        rewritten = rewrite_for_monitoring(original, RewriteParams(
            job_id=ticket.job_id, password=ticket.password,
            site=ticket.site, atm_url=ticket.atm_url,
            retry_count=max(int(spec.retry_seconds), 1)))
        return render_jdl(rewritten)

    def _admit(self, doc: JdlDocument) -> dict[str, str]:
        """Shared submission checks; returns the wrapper flags."""
        violations = validate_monitoring_jdl(doc)
        if violations:
            raise ValidationFailed("; ".join(violations))
        flags, _ = split_wrapper_arguments(doc.get("Arguments").tokens)
        if not flags.get("atm"):
            raise ValidationFailed("Arguments: missing -atm=<url> flag")
        if flags["site"] not in self.topology.site_names():
            raise UnknownSite(f"no computing element for site {flags['site']!r}")
        return flags

    def submit(self, jdl_text: str) -> SimJobHandle:
        """Validate and queue a rewritten JDL at the resource broker."""
        doc = parse_jdl(jdl_text)
        flags = self._admit(doc)
        with self._counter_lock:
            index = self._counter
            self._counter += 1
        handle = SimJobHandle(index=index,
                              spec=JobSpec(subject="", server_index=-1,
                                           site=flags["site"], command=()),
                              job_id=flags["id"])
        self.handles.append(handle)
        self.topology.rb_queue.put((handle, doc))
        return handle

    def submit_spec(self, spec: JobSpec) -> SimJobHandle:
        """UI path for a scenario job: register, wrap, then submit."""
        doc = parse_jdl(self.register_and_wrap(spec))
        flags = self._admit(doc)
        with self._counter_lock:
            index = self._counter
            self._counter += 1
        handle = SimJobHandle(index=index, spec=spec, job_id=flags["id"],
                              server_id=self.topology.atm_servers[spec.server_index].server_id)
        self.handles.append(handle)
        self.topology.rb_queue.put((handle, doc))
        return handle

    # -- pipeline components -----------------------------------------------------

    def _rb_loop(self) -> None:
        while not self._stop.is_set():
            item = self.topology.rb_queue.get()
            if item is None:
                return
            handle, doc = item
            flags, _ = split_wrapper_arguments(doc.get("Arguments").tokens)
            site = flags["site"]
            target = self._ce_queues.get(site)
            if target is None:
                handle.state = "unroutable"
                handle.done.set()
                continue
            handle.state = "queued"
            target.put((handle, doc))

    def _ce_loop(self, site: str) -> None:
        while not self._stop.is_set():
            item = self._ce_queues[site].get()
            if item is None:
                return
            handle, doc = item
            try:
                self._run_worker_node(handle, doc)
            except Exception as exc:  # pragma: no cover - defensive
                log.exception("WN for job %s crashed", handle.job_id)
                handle.state = f"error: {exc}"
            finally:
                handle.done.set()

    def _run_worker_node(self, handle: SimJobHandle, doc: JdlDocument) -> None:
        """CE side: translate the JDL into a wrapper invocation and run it."""
        flags, command = split_wrapper_arguments(doc.get("Arguments").tokens)
        retry = doc.get("RetryCount")
        stdout_name = doc.get("StdOutput")
        stderr_name = doc.get("StdError")

        job_dir = self.workdir / "jobs" / f"{handle.index:03d}-{handle.job_id}"
        job_dir.mkdir(parents=True, exist_ok=True)
        handle.job_dir = str(job_dir)
        handle.command = command

        argv = [
            sys.executable, "-m", "atm", "wrapper",
            f"-id={flags['id']}", f"-password={flags['password']}",
            f"-site={flags['site']}", f"-atm={flags['atm']}",
            f"-retry={retry.value if isinstance(retry, JdlNumber) else 10}",
            f"-stdout={stdout_name.value if isinstance(stdout_name, JdlString) else 'job.out'}",
            f"-stderr={stderr_name.value if isinstance(stderr_name, JdlString) else 'job.err'}",
            "--", *command,
        ]
        env = dict(os.environ)
        env[netaudit.AUDIT_LOG_ENV] = self.audit_log
        env[netaudit.AUDIT_ROLE_ENV] = "WN"
        env["ATM_SPOOL_DIR"] = str(job_dir)

        handle.state = "running"
        handle.start_ts = time.time()
        with (job_dir / "wrapper.out").open("wb") as out, \
             (job_dir / "wrapper.err").open("wb") as err:
            proc = subprocess.Popen(argv, cwd=job_dir, env=env,
                                    stdout=out, stderr=err)
            with self._procs_lock:
                self._procs.add(proc)
            try:
                handle.wrapper_exit = proc.wait()
            finally:
                with self._procs_lock:
                    self._procs.discard(proc)
        handle.end_ts = time.time()
        handle.state = "finished" if handle.wrapper_exit == 0 else "failed"


def run_scenario(topology: SimTopology, workload: list[JobSpec], *,
                 workdir: str | Path, name: str = "scenario", seed: int = 0,
                 timeout_seconds: float = 60.0) -> ScenarioReport:
    """Drive a full scenario; returns the report or raises ScenarioTimeout."""
    started = time.monotonic()
    sim = GridSim(topology, workdir)
    sim.start()
    try:
        for spec in workload:
            sim.submit_spec(spec)
        deadline = started + timeout_seconds
        for handle in sim.handles:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not handle.done.wait(timeout=remaining):
                raise ScenarioTimeout(
                    f"job {handle.job_id or handle.index} still {handle.state} "
                    f"after {timeout_seconds:.0f}s")

        # Read-only per-user queries, still through the audited UI path.
        user_queries: dict[str, dict[str, list[str]]] = {}
        for user in topology.users:
            per_server: dict[str, list[str]] = {}
            for server in sim.servers:
                client = AtmClient(server.url, role="UI")
                jobs = client.job_query(user.keypair.private_key, user.certificate)
                per_server[server.atm.config.server_id] = sorted(
                    entry["record"]["job_id"] for entry in jobs)
            user_queries[user.subject] = per_server

        server_dumps = {
            server.atm.config.server_id: server.atm.store.dump()
            for server in sim.servers
        }
        port_roles = {(server.host, server.port): "ATM" for server in sim.servers}
    finally:
        sim.stop()

    records = netaudit.read_log(sim.audit_log)
    audit = ConnectionAudit.resolve(records, port_roles)
    wn_listens = [e.to_wire() for e in audit.edges
                  if e.kind == "listen" and e.initiator_role == "WN"]

    return ScenarioReport(
        name=name, seed=seed,
        outcomes=[h.outcome() for h in sim.handles],
        audit=audit,
        server_dumps=server_dumps,
        user_queries=user_queries,
        outbound_violations=audit_outbound_only(audit),
        credential_violations=audit_credentials(list(sim.tickets.values())),
        wn_listen_records=wn_listens,
        elapsed_seconds=time.monotonic() - started,
    )


def run_scenario_file(path: str | Path, *, workdir: str | Path,
                      seed: Optional[int] = None) -> ScenarioReport:
    scenario = Scenario.from_file(path)
    if seed is not None:
        scenario.seed = seed
    topology, workload = scenario.build(Path(workdir))
    return run_scenario(topology, workload, workdir=workdir,
                        name=scenario.name, seed=scenario.seed,
                        timeout_seconds=scenario.timeout_seconds)


# ---------------------------------------------------------------------------
# Scripted workload emitter (the stand-in for a real application job)
# ---------------------------------------------------------------------------

def emit_main(argv: Optional[list[str]] = None) -> int:
    """Print progress lines at a fixed cadence, then exit with a chosen code."""
    parser = argparse.ArgumentParser(
        prog="atm emit", description="scripted progress-emitting workload")
    parser.add_argument("--total", type=int, default=200)
    parser.add_argument("--step", type=int, default=20)
    parser.add_argument("--interval-ms", type=int, default=50)
    parser.add_argument("--exit-code", type=int, default=0)
    parser.add_argument("--preamble", type=int, default=0,
                        help="non-progress chatter lines before the first step")
    args = parser.parse_args(argv)

    for i in range(args.preamble):
        print(f"setup step {i}", flush=True)
    for done in range(args.step, args.total + 1, args.step):
        print(f"completed {done} from {args.total} events", flush=True)
        time.sleep(args.interval_ms / 1000.0)
    return args.exit_code
