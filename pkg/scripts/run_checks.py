"""Gradient check plus per-task timings.

    python scripts/run_checks.py [trials]
"""

import sys

from dncf.cli import main as dncf


def main(trials="4"):
    code = dncf(["gradcheck", "--trials", trials])
    sys.exit(code or dncf(["bench"]))


if __name__ == "__main__":
    main(*sys.argv[1:])
