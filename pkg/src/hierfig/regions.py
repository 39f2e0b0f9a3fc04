"""Region mining inside a photographic panel.

Two proposal sources: boxes around author-drawn markers, and boxes around
objects a caption fragment names. Caption boxes survive only near a marker
(tau-gating on marker glyph centres); markers with no nearby caption box
are inflated to a minimum size. The union goes through NMS with caption
boxes preferred. Each surviving region then gets its grounded caption
fragment and a model-written local description.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .captions import MARKER_LEXICON, detect_marker_keywords
from .corpus import BBox, PanelRecord, RegionRecord
from .geometry import ScoredBox, center_distance, inflate, nms_indices
from .imaging import crop_px
from .lvlm import LvlmClient, LvlmRequest

log = logging.getLogger(__name__)

CAPTION_SCORE = 1.0
MARKER_SCORE = 0.5


@dataclass(frozen=True)
class MarkerBox:
    bbox: BBox  # glyph box, normalized panel coordinates
    marker_kind: str = "other"
    semantic_role: str = ""
    target_bbox: Optional[BBox] = None

    def __post_init__(self):
        if self.bbox.unit != "norm":
            raise ValueError("marker boxes are normalized")
        if self.marker_kind not in MARKER_LEXICON and self.marker_kind != "other":
            raise ValueError(f"unknown marker kind {self.marker_kind!r}")


@dataclass(frozen=True)
class CaptionBox:
    bbox: BBox  # normalized panel coordinates
    fragment_index: int
    fragment_text: str = ""
    visible: bool = True
    phrase: str = ""


@dataclass
class FusedRegion:
    record: RegionRecord
    fragment_index: Optional[int] = None  # grounded fragment for caption/fused provenance
    marker_kind: Optional[str] = None


@dataclass
class FusionAudit:
    kept_captions: list[int] = field(default_factory=list)
    discarded_captions: list[int] = field(default_factory=list)
    inflated_markers: list[int] = field(default_factory=list)
    suppressed: dict[int, int] = field(default_factory=dict)  # candidate -> survivor


def _numbered(fragments: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {t}" for i, t in enumerate(fragments))


def _meta(panel: PanelRecord) -> dict:
    return {"panel_id": panel.panel_id, "figure_id": panel.parent_figure,
            "panel_bbox": list(panel.bbox.as_tuple())}


def detect_markers(panel: PanelRecord, panel_image, client: LvlmClient,
                   article_title: Optional[str] = None) -> list[MarkerBox]:
    if not panel.is_photographic:
        raise ValueError(f"panel {panel.panel_id} is not photographic")
    slots = {"caption": panel.caption}
    if article_title:
        slots["article_title"] = article_title
    resp = client.request(LvlmRequest.with_image("marker_detect", slots, panel_image, meta=_meta(panel)))
    if not resp.valid:
        return []
    out = []
    for m in resp.payload["markers"]:
        target = BBox(*m["target_bbox"], unit="norm") if m["target_bbox"] else None
        out.append(MarkerBox(BBox(*m["glyph_bbox"], unit="norm"), m["kind"],
                             m["role"] or m["description"], target))
    return out


def propose_caption_boxes(panel: PanelRecord, panel_image, client: LvlmClient) -> list[CaptionBox]:
    if not panel.caption.strip() or not panel.fragments:
        raise ValueError(f"panel {panel.panel_id} has no caption fragments")
    resp = client.request(LvlmRequest.with_image(
        "caption_ground", {"fragments": _numbered(panel.fragments)}, panel_image, meta=_meta(panel)))
    if not resp.valid:
        return []
    out = []
    for o in resp.payload["objects"]:
        idx = o["fragment"]
        if not o["visible"] or not 0 <= idx < len(panel.fragments):
            continue
        out.append(CaptionBox(BBox(*o["bbox"], unit="norm"), idx, panel.fragments[idx],
                              True, o["phrase"]))
    return out


def marker_fragment(kind: Optional[str], fragments: Sequence[str]) -> Optional[int]:
    """Index of the only fragment naming ``kind``; None when absent or ambiguous."""
    if not kind or kind == "other":
        return None
    hits = [i for i, t in enumerate(fragments) if kind in detect_marker_keywords(t)]
    return hits[0] if len(hits) == 1 else None


def gate_caption_boxes(markers: Sequence[MarkerBox], caption_boxes: Sequence[CaptionBox],
                       tau: float) -> tuple[list[int], list[int]]:
    """Split caption box indices into (kept, discarded) by distance to the nearest glyph centre."""
    kept, dropped = [], []
    for i, c in enumerate(caption_boxes):
        near = any(center_distance(c.bbox, m.bbox) <= tau for m in markers)
        (kept if near else dropped).append(i)
    return kept, dropped


def fuse(markers: Sequence[MarkerBox], caption_boxes: Sequence[CaptionBox], tau: float,
         panel: PanelRecord, inflate_fraction: float = 0.10, nms_iou: float = 0.7,
         audit: Optional[FusionAudit] = None) -> list[FusedRegion]:
    """Regions in panel pixel coordinates, in NMS acceptance order."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    audit = audit if audit is not None else FusionAudit()
    pw, ph = panel.bbox.width, panel.bbox.height

    kept, dropped = gate_caption_boxes(markers, caption_boxes, tau)
    audit.kept_captions, audit.discarded_captions = kept, dropped

    cands: list[tuple[ScoredBox, Optional[int], Optional[str]]] = []
    for i in kept:
        c = caption_boxes[i]
        cands.append((ScoredBox(c.bbox, CAPTION_SCORE, "caption"), c.fragment_index, None))
    for j, m in enumerate(markers):
        if any(center_distance(caption_boxes[i].bbox, m.bbox) <= tau for i in kept):
            continue
        grown = inflate(m.bbox, inflate_fraction, pw, ph)
        if grown is None:
            continue
        audit.inflated_markers.append(j)
        cands.append((ScoredBox(grown, MARKER_SCORE, "marker"),
                      marker_fragment(m.marker_kind, panel.fragments), m.marker_kind))
    if not cands:
        return []

    order, suppressed = nms_indices([c[0] for c in cands], nms_iou)
    audit.suppressed = suppressed
    absorbed_same: set[int] = set()
    for lost, winner in suppressed.items():
        if cands[winner][0].tag == "caption" and cands[lost][1] is not None \
                and cands[lost][1] == cands[winner][1]:
            absorbed_same.add(winner)

    out = []
    for k, i in enumerate(order):
        box, frag, kind = cands[i]
        prov = "fused" if i in absorbed_same else box.tag
        rec = RegionRecord(f"{panel.panel_id}/r{k:02d}", panel.panel_id,
                           box.bbox.to_px(pw, ph), prov)
        out.append(FusedRegion(rec, frag, kind))
    return out


@dataclass
class AttachResult:
    regions: list[RegionRecord]
    dropped: int = 0
    caption_failures: int = 0


def attach_texts(fused: Sequence[FusedRegion], panel: PanelRecord, panel_image,
                 client: LvlmClient) -> AttachResult:
    result = AttachResult([])
    for fr in fused:
        rec = fr.record
        sub = None
        if fr.fragment_index is not None and 0 <= fr.fragment_index < len(panel.fragments):
            sub = panel.fragments[fr.fragment_index].strip() or None
        resp = client.request(LvlmRequest.with_image(
            "region_caption", {"panel_caption": panel.caption or "(none)"},
            crop_px(panel_image, rec.bbox),
            meta={**_meta(panel), "region_bbox": list(rec.bbox.as_tuple())}))
        cap = resp.payload["caption"].strip() if resp.valid else None
        if not resp.valid:
            result.caption_failures += 1
        if not sub and not cap:
            result.dropped += 1
            log.info("region %s dropped: no text", rec.region_id)
            continue
        result.regions.append(replace(rec, grounded_subcaption=sub, lvlm_caption=cap or None))
    return result
