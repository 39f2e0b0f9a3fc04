"""Independent toy image features for one fixture image.

Grey levels use the integer ITU-R 601 luma Pillow applies, the 8x8 grid is
an area-weighted box average with fractional pixel coverage, and the
per-channel histograms come from numpy.histogram. Only decoding goes
through Pillow. Writes the vector next to this file for the feature test.

    python3 tests/oracles/image_features.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent
IMAGE = HERE.parents[1] / "fixtures" / "figset20" / "images" / "fig00.png"


def coverage(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights: overlap of each output cell with each input pixel, rows sum to 1."""
    w = np.zeros((n_out, n_in))
    step = n_in / n_out
    for o in range(n_out):
        lo, hi = o * step, (o + 1) * step
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            w[o, i] = min(hi, i + 1) - max(lo, i)
        w[o] /= w[o].sum()
    return w


def features(path: Path) -> list[float]:
    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.int64)
    luma = (rgb[..., 0] * 19595 + rgb[..., 1] * 38470 + rgb[..., 2] * 7471 + 0x8000) >> 16
    h, w = luma.shape
    grid = coverage(h, 8) @ luma.astype(np.float64) @ coverage(w, 8).T
    grid = np.floor(grid + 0.5) / 255.0
    hist = [np.histogram(rgb[..., c], bins=8, range=(0, 256))[0] / (h * w) for c in range(3)]
    return list(grid.ravel()) + list(np.concatenate(hist))


if __name__ == "__main__":
    vec = features(IMAGE)
    out = HERE / "fig00_features.json"
    out.write_text(json.dumps({"image": "fixtures/figset20/images/fig00.png", "features": vec}, indent=1) + "\n")
    print(f"wrote {len(vec)} values to {out}")
