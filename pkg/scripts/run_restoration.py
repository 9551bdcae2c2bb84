"""Run every restoration task on the synthetic inputs and print PSNR against baselines.

    python scripts/run_restoration.py [results]
"""

import json
import sys
from pathlib import Path

import make_inputs
from dncf.cli import main as dncf

JOBS = {
    "denoise": ["--in", "denoise_noisy.png", "--clean", "denoise_clean.png",
                "--beta", "10", "--lambda-tv", "0.1"],
    "inpaint": ["--in", "inpaint_masked.png", "--mask", "inpaint_mask.png",
                "--clean", "inpaint_clean.png"],
    "sr": ["--in", "sr_low.png", "--sr-factor", "2", "--clean", "sr_clean.png"],
    "flash": ["--in", "flash_noflash.png", "--flash", "flash_flash.png",
              "--clean", "flash_clean.png"],
}


def main(root="results"):
    root = Path(root)
    inputs = root / "inputs"
    make_inputs.main(inputs)
    for task, args in JOBS.items():
        args = [str(inputs / a) if a.endswith(".png") else a for a in args]
        code = dncf([task, *args, "--out", str(root / task)])
        if code:
            sys.exit(code)
        m = json.loads((root / task / "metrics.json").read_text())
        base = ", ".join(f"{k} {v:.4g}" for k, v in m.get("baselines", {}).items())
        print(f"{task:8s} psnr {m['psnr']:.2f} dB ({m['selected']}); {base}; "
              f"{m['wall_clock_s']:.0f}s")


if __name__ == "__main__":
    main(*sys.argv[1:])
