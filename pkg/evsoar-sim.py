#!/usr/bin/env python3
"""
evsoar-sim - deterministic simulator of a three-tier vehicle SOAR: in-vehicle
agents, SOAR nodes at EV charging points and a central SOAR, connected over
emulated links.

The bench front end measures round-trip time, throughput and stability per
link preset, compares centralized and federated intrusion detection on a
synthetic multi-OEM fleet, and times the alert-to-response path of one
charging session. Every run is reproducible from its seed and writes CSV.

License: MIT
"""

from __future__ import annotations

import sys
from typing import NoReturn

from argument_parser import parse_arguments
from bench_orchestrator import BenchOrchestrator

# Exit codes
EXIT_SUCCESS = 0
EXIT_EXECUTION_ERROR = 1


def main() -> NoReturn:
    if __name__ != "__main__":
        sys.exit(EXIT_EXECUTION_ERROR)

    cfg = parse_arguments()
    orchestrator = BenchOrchestrator(cfg)
    sys.exit(orchestrator.run())


if __name__ == "__main__":
    main()
