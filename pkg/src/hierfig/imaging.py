from __future__ import annotations

import math
from pathlib import Path

from PIL import Image

from .corpus import BBox


def load_image(path, root=None) -> Image.Image:
    p = Path(path)
    if root is not None and not p.is_absolute():
        p = Path(root) / p
    with Image.open(p) as im:
        return im.convert("RGB")


def crop_px(image: Image.Image, box: BBox) -> Image.Image:
    """Crop to the pixel grid cells touched by ``box`` (floor/ceil, clamped)."""
    if box.unit != "px":
        box = box.to_px(*image.size)
    w, h = image.size
    x0 = min(max(int(math.floor(box.x_min)), 0), w - 1)
    y0 = min(max(int(math.floor(box.y_min)), 0), h - 1)
    x1 = max(min(int(math.ceil(box.x_max)), w), x0 + 1)
    y1 = max(min(int(math.ceil(box.y_max)), h), y0 + 1)
    return image.crop((x0, y0, x1, y1))
