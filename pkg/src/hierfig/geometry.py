"""Bounding-box arithmetic shared by the mining stages.

All functions are pure and work in double precision. Boxes carry a unit
flag (pixels or normalized) and mixing units is an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .corpus import BBox


class UnitMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredBox:
    bbox: BBox
    score: float
    tag: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")


def _same_unit(a: BBox, b: BBox) -> None:
    if a.unit != b.unit:
        raise UnitMismatchError(f"unit mismatch: {a.unit} vs {b.unit}")


def iou(a: BBox, b: BBox) -> float:
    _same_unit(a, b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def priority_order(boxes: Sequence[ScoredBox]) -> list[int]:
    """Descending score, then larger area, then insertion order."""
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, -boxes[i].bbox.area, i))


def nms_indices(boxes: Sequence[ScoredBox], iou_threshold: float) -> tuple[list[int], dict[int, int]]:
    """Greedy NMS over ``boxes``.

    Returns the surviving input indices in acceptance order and a map from
    each suppressed input index to the input index of the survivor that
    suppressed it.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    if not boxes:
        return [], {}
    units = {b.bbox.unit for b in boxes}
    if len(units) > 1:
        raise UnitMismatchError(f"mixed units in NMS input: {sorted(units)}")
    order = priority_order(boxes)
    arr = np.array([boxes[i].bbox.as_tuple() for i in order], dtype=np.float64)
    sup = kernels.greedy_nms(arr, iou_threshold)
    kept = [order[k] for k in range(len(order)) if sup[k] < 0]
    suppressed = {order[k]: order[int(sup[k])] for k in range(len(order)) if sup[k] >= 0}
    return kept, suppressed


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    kept, _ = nms_indices(boxes, iou_threshold)
    return [boxes[i] for i in kept]


def clip_to(bbox: BBox, width: float, height: float) -> Optional[BBox]:
    """Intersection with ``[0, width] x [0, height]``; ``None`` if nothing is left."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    x0 = min(max(bbox.x_min, 0.0), width)
    y0 = min(max(bbox.y_min, 0.0), height)
    x1 = min(max(bbox.x_max, 0.0), width)
    y1 = min(max(bbox.y_max, 0.0), height)
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == bbox.as_tuple():
        return bbox
    return BBox(x0, y0, x1, y1, unit=bbox.unit)


def center_distance(a: BBox, b: BBox) -> float:
    _same_unit(a, b)
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def inflate(bbox: BBox, fraction: float, panel_w: float, panel_h: float) -> Optional[BBox]:
    """Grow ``bbox`` about its centre to at least ``fraction`` of each panel side, then clip.

    Normalized boxes are inflated in normalized space (panel sides of 1).
    """
    if fraction <= 0:
        raise ValueError("fraction must be positive")
    if bbox.unit == "norm":
        panel_w = panel_h = 1.0
    cx, cy = bbox.center
    w = max(bbox.width, fraction * panel_w)
    h = max(bbox.height, fraction * panel_h)
    grown = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    x0 = max(grown[0], 0.0)
    y0 = max(grown[1], 0.0)
    x1 = min(grown[2], panel_w)
    y1 = min(grown[3], panel_h)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1, unit=bbox.unit)


def merge_union(boxes: Sequence[BBox]) -> BBox:
    if not boxes:
        raise ValueError("merge_union of an empty list")
    units = {b.unit for b in boxes}
    if len(units) > 1:
        raise UnitMismatchError(f"mixed units: {sorted(units)}")
    return BBox(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
        unit=boxes[0].unit,
    )
