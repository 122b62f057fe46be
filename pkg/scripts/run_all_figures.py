#!/usr/bin/env python3
"""Regenerate every shipped figure preset into figures/<name>/.

Usage: python3 scripts/run_all_figures.py [outdir]
"""

import sys
from pathlib import Path

from sodiff import cli


def main() -> int:
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "figures")
    failures = []
    for name in cli.list_presets():
        out = root / name
        print(f"=== preset {name} -> {out}")
        code = cli.main(["preset", name, "--out", str(out)])
        if code != 0:
            failures.append((name, code))
    if failures:
        print("FAILED:", failures)
        return 1
    print(f"all presets written under {root}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
