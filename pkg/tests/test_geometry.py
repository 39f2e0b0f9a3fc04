from __future__ import annotations

import math

import numpy as np
import pytest
from shapely.geometry import box as sbox

from helpers import random_box
from hierfig.corpus import BBox
from hierfig.geometry import (ScoredBox, UnitMismatchError, center_distance, clip_to, inflate, iou,
                              merge_union, nms, nms_indices)


def shapely_iou(a: BBox, b: BBox) -> float:
    pa, pb = sbox(*a.as_tuple()), sbox(*b.as_tuple())
    return pa.intersection(pb).area / pa.union(pb).area


def brute_force_nms(boxes: list[ScoredBox], thr: float) -> list[int]:
    """Check every pair: a box survives iff no higher-priority survivor overlaps it at >= thr."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, -boxes[i].bbox.area, i))
    kept: list[int] = []
    for i in order:
        if all(shapely_iou(boxes[i].bbox, boxes[j].bbox) < thr for j in kept):
            kept.append(i)
    return kept


def random_scored(rng, n):
    scores = rng.choice([0.25, 0.5, 0.75, 1.0], size=n) if rng.random() < 0.5 else rng.random(n)
    return [ScoredBox(random_box(rng, 60, 30), float(s)) for s in scores]


def test_iou_examples():
    b = BBox(0, 0, 2, 2)
    assert iou(b, b) == 1.0
    assert iou(b, BBox(5, 5, 6, 6)) == 0.0
    assert iou(b, BBox(2, 0, 3, 2)) == 0.0  # touching edges
    assert iou(b, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_unit_mismatch():
    with pytest.raises(UnitMismatchError):
        iou(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1, unit="norm"))


def test_iou_matches_shapely_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1500):
        a, b = random_box(rng), random_box(rng)
        v = iou(a, b)
        assert v == pytest.approx(shapely_iou(a, b), abs=1e-12)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


def test_nms_examples():
    one = [ScoredBox(BBox(0, 0, 1, 1), 0.3)]
    assert nms(one, 0.7) == one
    a = ScoredBox(BBox(0, 0, 4, 4), 0.8, "a")
    b = ScoredBox(BBox(0, 0, 4, 4), 0.9, "b")
    assert nms([a, b], 0.7) == [b]
    with pytest.raises(ValueError):
        nms([a], 0.0)


def test_nms_tie_break_area_then_insertion():
    small = ScoredBox(BBox(0, 0, 9, 10), 0.5, "small")
    large = ScoredBox(BBox(0, 0, 10, 10), 0.5, "large")
    assert nms([small, large], 0.7) == [large]
    twin1 = ScoredBox(BBox(0, 0, 10, 10), 0.5, "first")
    twin2 = ScoredBox(BBox(0, 0, 10, 10), 0.5, "second")
    assert nms([twin1, twin2], 0.7) == [twin1]


def test_nms_matches_brute_force_randomized():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        boxes = random_scored(rng, int(rng.integers(1, 25)))
        kept, suppressed = nms_indices(boxes, 0.7)
        assert kept == brute_force_nms(boxes, 0.7)
        assert set(kept) | set(suppressed) == set(range(len(boxes)))
        for i, j in ((i, j) for i in kept for j in kept if i < j):
            assert iou(boxes[i].bbox, boxes[j].bbox) < 0.7
        for lost, winner in suppressed.items():
            assert winner in kept and iou(boxes[lost].bbox, boxes[winner].bbox) >= 0.7


def test_nms_zero_score_box_never_removes_a_survivor():
    rng = np.random.default_rng(2)
    for _ in range(300):
        boxes = [ScoredBox(random_box(rng, 60, 30), float(s) + 0.01) for s in rng.random(12)]
        before = [boxes[i] for i in nms_indices(boxes, 0.7)[0]]
        extra = ScoredBox(random_box(rng, 60, 30), 0.0)
        after = nms(boxes + [extra], 0.7)
        assert after[:len(before)] == before
        assert len(after) - len(before) in (0, 1)


def test_clip_examples():
    inside = BBox(1, 1, 3, 3)
    assert clip_to(inside, 10, 10) is inside
    assert clip_to(BBox(-5, -5, 3, 3), 10, 10) == BBox(0, 0, 3, 3)
    assert clip_to(BBox(12, 12, 20, 20), 10, 10) is None
    with pytest.raises(ValueError):
        clip_to(inside, 0, 10)


def test_clip_matches_shapely_and_is_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        x0, y0 = rng.uniform(-40, 110, 2)
        b = BBox(x0, y0, x0 + rng.uniform(0.1, 60), y0 + rng.uniform(0.1, 60))
        c = clip_to(b, 100, 80)
        ref = sbox(*b.as_tuple()).intersection(sbox(0, 0, 100, 80))
        if ref.is_empty or ref.area == 0:
            assert c is None
            continue
        assert c.as_tuple() == pytest.approx(ref.bounds, abs=1e-12)
        assert clip_to(c, 100, 80) == c


def test_center_distance_examples():
    b = BBox(0.2, 0.2, 0.4, 0.4, unit="norm")
    assert center_distance(b, b) == 0.0
    a = BBox(0.4, 0.4, 0.6, 0.6, unit="norm")
    c = BBox(0.45, 0.4, 0.65, 0.6, unit="norm")
    assert center_distance(a, c) == pytest.approx(0.05, abs=1e-15)
    corner0 = BBox(0, 0, 1e-9, 1e-9, unit="norm")
    corner1 = BBox(1 - 1e-9, 1 - 1e-9, 1, 1, unit="norm")
    assert center_distance(corner0, corner1) == pytest.approx(math.sqrt(2), abs=1e-8)
    with pytest.raises(UnitMismatchError):
        center_distance(a, BBox(0, 0, 1, 1))


def test_inflate_examples():
    big = BBox(10, 10, 60, 60)
    assert inflate(big, 0.1, 100, 100) == big
    m = BBox(49, 49, 51, 51)
    g = inflate(m, 0.10, 100, 100)
    assert g.as_tuple() == pytest.approx((45, 45, 55, 55))
    assert g.center == m.center
    corner = BBox(0, 0, 2, 2)
    g = inflate(corner, 0.10, 100, 100)
    assert g.as_tuple() == pytest.approx((0, 0, 6, 6))
    assert g.center[0] > corner.center[0]
    unclipped = BBox(-4, -4, 6, 6)
    assert g == clip_to(unclipped, 100, 100)


def test_inflate_normalized_box_uses_unit_panel():
    g = inflate(BBox(0.49, 0.49, 0.51, 0.51, unit="norm"), 0.1, 300, 200)
    assert g.as_tuple() == pytest.approx((0.45, 0.45, 0.55, 0.55))


def test_inflate_never_shrinks():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        b = random_box(rng, 100, 50)
        frac = float(rng.uniform(0.01, 0.5))
        g = inflate(b, frac, 100, 100)
        cx, cy = b.center
        w, h = max(b.width, frac * 100), max(b.height, frac * 100)
        ref = clip_to(BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), 100, 100)
        assert g.as_tuple() == pytest.approx(ref.as_tuple(), abs=1e-12)
        assert g.x_min <= b.x_min + 1e-12 and g.x_max >= b.x_max - 1e-12
        assert g.y_min <= b.y_min + 1e-12 and g.y_max >= b.y_max - 1e-12


def test_merge_union_examples():
    b = BBox(0, 0, 1, 1)
    assert merge_union([b]) == b
    assert merge_union([b, BBox(2, 2, 3, 3)]) == BBox(0, 0, 3, 3)
    with pytest.raises(ValueError):
        merge_union([])


def test_merge_union_matches_shapely_and_is_associative():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a, b, c = (random_box(rng) for _ in range(3))
        hull = merge_union([a, b, c])
        assert merge_union([merge_union([a, b]), c]) == hull == merge_union([a, merge_union([b, c])])
        ref = sbox(*a.as_tuple()).union(sbox(*b.as_tuple())).union(sbox(*c.as_tuple()))
        assert hull.as_tuple() == pytest.approx(ref.bounds, abs=1e-12)
