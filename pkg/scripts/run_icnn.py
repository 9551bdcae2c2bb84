"""Compare FICNN, PICNN and CVXR-Net on the 2-D datasets over five seeds.

    python scripts/run_icnn.py [results] [epochs]
"""

import sys
from pathlib import Path

from dncf.cli import main as dncf


def main(root="results", epochs="2000"):
    sys.exit(dncf(["icnn-demo", "--seeds", "5", "--epochs", epochs,
                   "--out", str(Path(root) / "icnn")]))


if __name__ == "__main__":
    main(*sys.argv[1:])
