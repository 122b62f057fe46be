#!/usr/bin/env python3
"""Run the acceptance suite and show one pass/fail line per criterion.

Usage: python3 scripts/acceptance_report.py
"""

import subprocess
import sys
from pathlib import Path


def main() -> int:
    repo = Path(__file__).resolve().parent.parent
    return subprocess.call(
        [sys.executable, "-m", "pytest", str(repo / "tests/test_acceptance.py"),
         "-v", "-s", "--no-header"], cwd=repo)


if __name__ == "__main__":
    sys.exit(main())
