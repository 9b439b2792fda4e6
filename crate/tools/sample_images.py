"""Writes the scikit-image sample pictures used by the tests and the bundled prior.

    python tools/sample_images.py fixtures crates/core/tests/data
    python tools/sample_images.py training /tmp/prior-train
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data, transform

FIXTURES = ["astronaut", "coffee", "chelsea", "rocket", "camera"]
TRAINING = ["brick", "grass", "gravel", "hubble_deep_field", "immunohistochemistry", "coins", "moon", "page", "text"]


def square(img, side):
    h, w = img.shape[:2]
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    crop = img[y0 : y0 + s, x0 : x0 + s]
    small = transform.resize(crop, (side, side), anti_aliasing=True)
    return (np.clip(small, 0, 1) * 255 + 0.5).astype(np.uint8)


def main():
    kind, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    for name in FIXTURES if kind == "fixtures" else TRAINING:
        img = getattr(data, name)()
        if kind == "fixtures":
            img = square(img, 128)
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        Image.fromarray(img[..., :3]).save(out / f"{name}.png")


if __name__ == "__main__":
    main()
