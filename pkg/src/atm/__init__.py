"""Advance Task Monitor: application-job monitoring for grid-style pipelines.

Jobs register with a monitoring server before submission and receive a
per-job ticket (id + password).  A wrapper substituted as the job's
executable runs the real work on the worker node, parses progress out of its
standard output, and pushes events to the server over outbound-only
connections, so it works from behind NAT.  Owners query status with their
certificate and see only their own jobs; knowing a ticket grants access to
exactly that one job.

Subpackages: :mod:`atm.jdl` (job description rewriting), :mod:`atm.model`
(identities, tickets, events), :mod:`atm.store` (durable persistence),
:mod:`atm.server` / :mod:`atm.client` (the wire protocol), :mod:`atm.agent`
(the worker-node wrapper), :mod:`atm.gridsim` (pipeline simulation and
connection auditing), :mod:`atm.cli` (command-line tools).
"""

__version__ = "0.1.0"
