"""Write the synthetic test images used by the restoration scripts.

    python scripts/make_inputs.py results/inputs
"""

import sys
from pathlib import Path

from dncf import filters, synthetic
from dncf.io import save_image


def main(out="results/inputs"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clean = synthetic.textured_scene(128, 3, 0)
    save_image(clean, out / "denoise_clean.png")
    save_image(synthetic.add_noise(clean, 25 / 255, 1), out / "denoise_noisy.png")

    grating = synthetic.grating_scene(64, 3, 0)
    mask = synthetic.random_mask((64, 64), 0.25, 10)
    save_image(grating, out / "inpaint_clean.png")
    save_image(grating * mask, out / "inpaint_masked.png")
    save_image(mask, out / "inpaint_mask.png")

    hires = synthetic.scene(64, 3, 0)
    save_image(hires, out / "sr_clean.png")
    save_image(filters.downsample(hires, 2), out / "sr_low.png")

    flash, no_flash, ambient = synthetic.flash_pair(64, 0)
    save_image(flash, out / "flash_flash.png")
    save_image(no_flash, out / "flash_noflash.png")
    save_image(ambient, out / "flash_clean.png")
    print(f"inputs written to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
