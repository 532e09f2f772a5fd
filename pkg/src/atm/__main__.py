"""``python -m atm <tool>``: dispatch to the command-line entry points.

Lets subprocess-based components (worker nodes in the simulator, test
harnesses) invoke the tools without relying on console scripts being on PATH.
"""

from __future__ import annotations

import sys

from . import cli

TOOLS = {
    "server": cli.server_main,
    "user-register": cli.user_register_main,
    "job-register": cli.job_register_main,
    "job-status": cli.job_status_main,
    "wrapper": cli.wrapper_main,
    "sim": cli.sim_main,
    "ca": cli.ca_main,
    "emit": cli.emit_main,
}


def main() -> int:
    if len(sys.argv) < 2 or sys.argv[1] not in TOOLS:
        names = ", ".join(sorted(TOOLS))
        print(f"usage: python -m atm <tool> [args...]  (tools: {names})",
              file=sys.stderr)
        return 2
    return TOOLS[sys.argv[1]](sys.argv[2:])


if __name__ == "__main__":
    sys.exit(main())
