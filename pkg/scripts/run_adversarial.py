"""Attack the toy classifier with every method, then defend against each one.

    python scripts/run_adversarial.py [results] [samples]
"""

import sys
from pathlib import Path

from dncf.adversarial import ATTACKS
from dncf.cli import main as dncf


def main(root="results", samples="200"):
    root = Path(root)
    for method in ATTACKS:
        if dncf(["attack", "--method", method, "--samples", samples,
                 "--out", str(root / "attack" / method)]):
            sys.exit(1)
    sys.exit(dncf(["defend", "--samples", samples, "--out", str(root / "defend")]))


if __name__ == "__main__":
    main(*sys.argv[1:])
