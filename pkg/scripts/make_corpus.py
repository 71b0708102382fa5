"""Regenerate the bundled grayscale corpus from scikit-image sample images.

All source images are public domain or CC0 (see scikit-image's data README).
Each is converted to grayscale, center-cropped to a square, resized to
SIZE x SIZE and written as 8-bit binary PGM.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image
import skimage.data

NAMES = [
    "camera", "astronaut", "coins", "moon", "clock", "coffee",
    "chelsea", "rocket", "grass", "gravel", "brick", "immunohistochemistry",
]
SIZE = 192


def main(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in NAMES:
        img = np.asarray(getattr(skimage.data, name)())
        pil = Image.fromarray(img).convert("L")
        w, h = pil.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        pil = pil.crop((left, top, left + side, top + side))
        pil = pil.resize((SIZE, SIZE), Image.LANCZOS)
        pixels = np.asarray(pil, dtype=np.uint8)
        with open(out_dir / f"{name}.pgm", "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (SIZE, SIZE))
            fh.write(pixels.tobytes())


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "deepinverse" / "data" / "corpus"
    main(sys.argv[1] if len(sys.argv) > 1 else default)
