from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from helpers import by_template, norm_box, random_box, scripted_client
from hierfig.corpus import BBox, PanelRecord
from hierfig.geometry import center_distance, iou
from hierfig.regions import (CaptionBox, FusionAudit, MarkerBox, attach_texts, detect_markers, fuse,
                             gate_caption_boxes, marker_fragment, propose_caption_boxes)


def panel(fragments=("Arrows mark the tumor core.",), w=100, h=100, photographic=True) -> PanelRecord:
    return PanelRecord("f/p00", "f", BBox(0, 0, w, h), identifier="A", fragments=list(fragments),
                       is_photographic=photographic)


IMG = Image.new("RGB", (100, 100), (120, 40, 90))


def marker(cx, cy, kind="arrow", side=0.02):
    return MarkerBox(norm_box(cx, cy, side, side), kind)


def cbox(x0, y0, x1, y1, frag=0):
    return CaptionBox(BBox(x0, y0, x1, y1, unit="norm"), frag)


def test_detect_markers_passthrough_and_schema():
    answer = {"markers": [
        {"kind": "arrows", "glyph_bbox": [0.1, 0.1, 0.15, 0.15], "target_bbox": [0.1, 0.1, 0.3, 0.3],
         "role": "lesion"},
        {"kind": "arrow", "glyph_bbox": [0.5, 0.5, 0.55, 0.55]},
        {"kind": "arrow", "glyph_bbox": [0.9, 0.9, 1.2, 1.0]}]}
    client, t = scripted_client(by_template(marker_detect=answer))
    ms = detect_markers(panel(), IMG, client, article_title="Liver study")
    assert [m.marker_kind for m in ms] == ["arrow", "arrow"]
    assert ms[0].target_bbox == BBox(0.1, 0.1, 0.3, 0.3, unit="norm") and ms[0].semantic_role == "lesion"
    assert ms[1].target_bbox is None
    assert "Liver study" in t.calls[0][1]

    client, _ = scripted_client(by_template(marker_detect={"markers": []}))
    assert detect_markers(panel(), IMG, client) == []
    client, _ = scripted_client(by_template(marker_detect="nonsense"))
    assert detect_markers(panel(), IMG, client) == []
    with pytest.raises(ValueError):
        detect_markers(panel(photographic=False), IMG, client)


def test_propose_caption_boxes():
    answer = {"objects": [
        {"fragment": 0, "phrase": "tumor core", "bbox": [0.2, 0.2, 0.6, 0.6], "visible": True},
        {"fragment": 0, "phrase": "vessel", "bbox": [0.1, 0.1, 0.2, 0.2], "visible": False},
        {"fragment": 5, "phrase": "ghost", "bbox": [0.1, 0.1, 0.2, 0.2], "visible": True}]}
    client, _ = scripted_client(by_template(caption_ground=answer))
    boxes = propose_caption_boxes(panel(), IMG, client)
    assert len(boxes) == 1
    assert boxes[0].fragment_index == 0 and boxes[0].fragment_text == "Arrows mark the tumor core."
    assert boxes[0].phrase == "tumor core"
    client, _ = scripted_client(by_template(caption_ground="{}"))
    assert propose_caption_boxes(panel(), IMG, client) == []
    with pytest.raises(ValueError):
        propose_caption_boxes(panel(fragments=()), IMG, client)


def test_gating_examples():
    m = marker(0.5, 0.5)
    near = CaptionBox(norm_box(0.55, 0.5, 0.2, 0.2), 0)
    far = CaptionBox(norm_box(0.8, 0.5, 0.2, 0.2), 0)
    assert gate_caption_boxes([m], [near, far], 0.1) == ([0], [1])
    assert gate_caption_boxes([], [near], 0.1) == ([], [0])


def test_isolated_marker_is_inflated():
    regions = fuse([marker(0.5, 0.5)], [], 0.1, panel())
    assert len(regions) == 1
    r = regions[0].record
    assert r.provenance == "marker"
    assert r.bbox.as_tuple() == pytest.approx((45, 45, 55, 55))
    assert regions[0].fragment_index == 0  # the only fragment naming an arrow


def test_fuse_prefers_caption_boxes_and_empty_case():
    audit = FusionAudit()
    cb = CaptionBox(norm_box(0.5, 0.5, 0.3, 0.3), 0)
    regions = fuse([marker(0.52, 0.5)], [cb], 0.1, panel(), audit=audit)
    assert [r.record.provenance for r in regions] == ["caption"]
    assert audit.kept_captions == [0] and audit.inflated_markers == []
    assert fuse([], [], 0.1, panel()) == []
    assert fuse([], [cb], 0.1, panel()) == []
    with pytest.raises(ValueError):
        fuse([], [], 0.0, panel())


def test_fused_provenance_when_caption_absorbs_same_fragment_marker():
    p = panel(fragments=("The arrow marks the tumor core.", "Overview."))
    caption = cbox(0.3, 0.3, 0.7, 0.7, frag=0)
    m1 = marker(0.5, 0.5, kind="asterisk")
    m2 = marker(0.5, 0.56, kind="arrow")  # 0.06 from the caption centre, outside tau
    audit = FusionAudit()
    regions = fuse([m1, m2], [caption], 0.05, p, inflate_fraction=0.4, audit=audit)
    assert audit.inflated_markers == [1]
    grown = BBox(30, 36, 70, 76)
    assert iou(grown, BBox(30, 30, 70, 70)) == pytest.approx(1360 / 1840)
    assert len(regions) == 1 and regions[0].record.provenance == "fused"
    assert audit.suppressed == {1: 0}

    # a different-fragment marker being absorbed does not make it fused
    p2 = panel(fragments=("Tumor core.", "The arrow marks necrosis."))
    regions = fuse([m1, m2], [cbox(0.3, 0.3, 0.7, 0.7, frag=0)], 0.05, p2, inflate_fraction=0.4)
    assert [r.record.provenance for r in regions] == ["caption"]


def test_fusion_invariants_randomized_tau_scan():
    rng = np.random.default_rng(11)
    for trial in range(300):
        tau = float(rng.choice([0.02, 0.05, 0.1, 0.2, 0.4]))
        markers = [MarkerBox(random_box(rng, 100, 8, unit="norm"), str(rng.choice(["arrow", "asterisk"])))
                   for _ in range(int(rng.integers(0, 5)))]
        caps = [CaptionBox(random_box(rng, 100, 50, unit="norm"), int(rng.integers(0, 2)))
                for _ in range(int(rng.integers(0, 6)))]
        p = panel(fragments=("An arrow here.", "An asterisk there."), w=int(rng.integers(20, 300)),
                  h=int(rng.integers(20, 300)))
        regions = fuse(markers, caps, tau, p)
        boxes = [r.record.bbox for r in regions]
        for i in range(len(boxes)):
            assert 0 <= boxes[i].x_min < boxes[i].x_max <= p.bbox.width + 1e-9
            for j in range(i + 1, len(boxes)):
                assert iou(boxes[i], boxes[j]) < 0.7
        for r in regions:
            if r.record.provenance in ("caption", "fused"):
                nb = r.record.bbox.to_norm(p.bbox.width, p.bbox.height)
                assert min(center_distance(nb, m.bbox) for m in markers) <= tau + 1e-12
        kept, _ = gate_caption_boxes(markers, caps, tau)
        assert sum(r.record.provenance != "marker" for r in regions) <= len(kept)


def test_marker_fragment_uniqueness():
    assert marker_fragment("arrow", ["The arrow marks X.", "Plain text."]) == 0
    assert marker_fragment("arrow", ["Arrows mark X.", "An arrow marks Y."]) is None
    assert marker_fragment("arrow", ["Nothing."]) is None
    assert marker_fragment("other", ["The arrow."]) is None
    assert marker_fragment("arrowhead", ["Arrow and arrowheads."]) == 0


def test_attach_texts_dual_pathway():
    p = panel(fragments=("The arrow marks the tumor core.",))
    fused = fuse([marker(0.5, 0.5)], [], 0.1, p)
    client, t = scripted_client(by_template(region_caption={"caption": "dense cells"}))
    res = attach_texts(fused, p, IMG, client)
    r = res.regions[0]
    assert r.grounded_subcaption == "The arrow marks the tumor core." and r.lvlm_caption == "dense cells"
    assert t.calls[0][0].slots == {"panel_caption": p.caption}

    two = panel(fragments=("An arrow marks X.", "Another arrow marks Y."))
    fused = fuse([marker(0.5, 0.5)], [], 0.1, two)
    res = attach_texts(fused, two, IMG, client)
    assert res.regions[0].grounded_subcaption is None and res.regions[0].lvlm_caption == "dense cells"


def test_attach_texts_drops_textless_regions():
    p = panel(fragments=("Plain text.",))
    fused = fuse([marker(0.5, 0.5)], [], 0.1, p)
    client, _ = scripted_client(by_template(region_caption={"caption": ""}))
    res = attach_texts(fused, p, IMG, client)
    assert res.regions == [] and res.dropped == 1 and res.caption_failures == 1
