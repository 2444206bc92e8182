#!/usr/bin/env python3
"""Run flatlat tests in a predictable order.

This runs:
  1) Unit tests (offline, deterministic) using default pytest.ini selection
  2) Integration tests (desk-scale training), explicitly
  3) Throughput benchmarks, only with --latency (wall-clock sensitive)
"""

from __future__ import annotations

import argparse
import subprocess
import sys


def _run(cmd: list[str]) -> int:
    print(f"\n$ {' '.join(cmd)}")
    return subprocess.call(cmd)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--latency", action="store_true", help="also run the throughput benchmarks")
    parser.add_argument("--unit-only", action="store_true", help="skip the desk-scale runs")
    args = parser.parse_args()

    rc = _run([sys.executable, "-m", "pytest", "-q"])
    if not args.unit_only:
        rc |= _run([sys.executable, "-m", "pytest", "-q", "-m", "integration and not latency"])
    if args.latency:
        rc |= _run([sys.executable, "-m", "pytest", "-q", "-m", "latency"])

    if rc == 0:
        print("\nALL TESTS PASSED")
    else:
        print("\nSOME TESTS FAILED")
    return rc


if __name__ == "__main__":
    raise SystemExit(main())
