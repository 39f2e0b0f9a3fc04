"""Compound-figure decomposition into panels with their caption text.

Proposals come from several views of the figure (the full image plus
seeded random crops), are mapped back to figure coordinates, vote-merged
within identifier groups and thinned with NMS. Text association starts
from deterministic caption routing and only asks the model about
fragments the router could not place unambiguously.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .captions import (CaptionFragment, identifier_key, is_identifier, route_fragments,
                       split_fragments, ROMAN)
from .corpus import BBox, FigureRecord, PanelRecord
from .geometry import ScoredBox, iou, nms_indices
from .imaging import crop_px
from .lvlm import LvlmClient, LvlmRequest

log = logging.getLogger(__name__)

NON_PHOTOGRAPHIC_KEYWORDS = ("plot", "chart", "graph", "histogram", "diagram", "schematic",
                             "table", "flowchart", "curve")
DUPLICATE_FLAG = "duplicate_identifier"


@dataclass(frozen=True)
class PanelProposal:
    bbox: BBox  # normalized figure coordinates
    identifier: Optional[str] = None
    scale: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)  # crop origin, normalized figure coordinates
    weight: float = 1.0
    description: str = ""

    def __post_init__(self):
        if self.bbox.unit != "norm":
            raise ValueError("proposal boxes are normalized")
        if not self.weight > 0:
            raise ValueError("vote weight must be positive")


def view_crops(width: int, height: int, n_views: int, rng: np.random.Generator,
               scale_range: tuple[float, float] = (0.6, 1.0)) -> list[tuple[int, int, int, int]]:
    """Pixel crops ``(x0, y0, x1, y1)``: the full figure first, then random crops."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    crops = [(0, 0, width, height)]
    lo, hi = scale_range
    for _ in range(n_views - 1):
        s = float(rng.uniform(lo, hi))
        cw = max(1, min(width, int(round(s * width))))
        ch = max(1, min(height, int(round(s * height))))
        ox = int(rng.integers(0, width - cw + 1))
        oy = int(rng.integers(0, height - ch + 1))
        crops.append((ox, oy, ox + cw, oy + ch))
    return crops


def crop_to_figure(box: Sequence[float], crop: tuple[int, int, int, int],
                   width: float, height: float) -> BBox:
    """Map a box normalized to ``crop`` into normalized figure coordinates."""
    x0, y0, x1, y1 = crop
    cw, ch = x1 - x0, y1 - y0
    return BBox((x0 + box[0] * cw) / width, (y0 + box[1] * ch) / height,
                (x0 + box[2] * cw) / width, (y0 + box[3] * ch) / height, unit="norm")


def propose_panels(figure: FigureRecord, image, client: LvlmClient, n_views: int,
                   rng: np.random.Generator, scale_range=(0.6, 1.0),
                   raw_log: Optional[list] = None) -> list[PanelProposal]:
    W, H = figure.width_px, figure.height_px
    crops = view_crops(W, H, n_views, rng, scale_range)
    requests = [
        LvlmRequest.with_image("panel_decompose", {"caption": figure.caption},
                               image.crop(c) if c != (0, 0, W, H) else image,
                               meta={"figure_id": figure.figure_id, "crop": c, "view": v})
        for v, c in enumerate(crops)
    ]
    responses = client.request_many(requests)
    proposals: list[PanelProposal] = []
    for c, resp in zip(crops, responses):
        if raw_log is not None:
            raw_log.append({"crop": list(c), "raw": resp.raw, "valid": resp.valid,
                            "problems": resp.problems})
        if not resp.valid:
            continue
        scale = (c[2] - c[0]) / W
        for entry in resp.payload["panels"]:
            proposals.append(PanelProposal(
                bbox=crop_to_figure(entry["bbox"], c, W, H),
                identifier=entry["id"],
                scale=scale,
                offset=(c[0] / W, c[1] / H),
                description=entry["description"] or "",
            ))
    if not proposals:
        log.info("figure %s: no valid panel proposals", figure.figure_id)
    return proposals


def _vote_merge(group: list[PanelProposal], merge_iou: float) -> list[PanelProposal]:
    """Merge pairs with IoU >= ``merge_iou`` until no pair qualifies."""
    items = list(group)
    while True:
        pair = None
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                if iou(items[i].bbox, items[j].bbox) >= merge_iou:
                    pair = (i, j)
                    break
            if pair:
                break
        if pair is None:
            return items
        a, b = items[pair[0]], items[pair[1]]
        w = a.weight + b.weight
        coords = [(ca * a.weight + cb * b.weight) / w
                  for ca, cb in zip(a.bbox.as_tuple(), b.bbox.as_tuple())]
        desc = a.description if a.weight >= b.weight or not b.description else b.description
        items[pair[0]] = replace(a, bbox=BBox(*coords, unit="norm"), weight=w,
                                 description=desc or a.description)
        del items[pair[1]]


def _identifier_sort_key(ident: str) -> tuple:
    up = ident.upper()
    if up in ROMAN and (len(up) > 1 or up in "IVX"):
        return (1, ROMAN.index(up), up)
    return (0, 0, up)


def consolidate(proposals: Sequence[PanelProposal], figure_id: str, width: float, height: float,
                merge_iou: float = 0.5, nms_iou: float = 0.7) -> list[PanelRecord]:
    """Vote-merge and NMS within identifier groups; return panels in reading order."""
    groups: dict[Optional[str], list[PanelProposal]] = {}
    for p in proposals:
        key = identifier_key(p.identifier) if p.identifier is not None else None
        groups.setdefault(key, []).append(p)

    survivors: list[tuple[Optional[str], PanelProposal]] = []
    for key, group in groups.items():
        merged = _vote_merge(group, merge_iou)
        scored = [ScoredBox(m.bbox, m.weight) for m in merged]
        kept, _ = nms_indices(scored, nms_iou)
        for i in kept:
            survivors.append((key, merged[i]))

    counts: dict[str, int] = {}
    for key, _ in survivors:
        if key is not None:
            counts[key] = counts.get(key, 0) + 1

    def order(item):
        key, p = item
        ident = (0,) + _identifier_sort_key(key) if key is not None else (1, 0, 0, "")
        return ident + (p.bbox.y_min, p.bbox.x_min, -p.weight)

    panels = []
    for k, (key, p) in enumerate(sorted(survivors, key=order)):
        panels.append(PanelRecord(
            panel_id=f"{figure_id}/p{k:02d}",
            parent_figure=figure_id,
            bbox=p.bbox.to_px(width, height),
            identifier=p.identifier if p.identifier is None else p.identifier.upper(),
            votes=p.weight,
            proposal_description=p.description or None,
            flags=[DUPLICATE_FLAG] if key is not None and counts[key] > 1 else [],
        ))
    return panels


def panels_as_proposals(panels: Sequence[PanelRecord], width: float, height: float) -> list[PanelProposal]:
    """Turn consolidated panels back into proposals (used to check idempotence)."""
    return [PanelProposal(p.bbox.to_norm(width, height), p.identifier, weight=p.votes,
                          description=p.proposal_description or "") for p in panels]


def keyword_photographic(panel: PanelRecord) -> bool:
    """Photographic unless the proposal description names a plot-like graphic."""
    desc = (panel.proposal_description or "").lower()
    return not any(re.search(rf"\b{k}s?\b", desc) for k in NON_PHOTOGRAPHIC_KEYWORDS)


def filter_photographic(panels: Sequence[PanelRecord],
                        predicate: Callable[[PanelRecord], bool] = keyword_photographic
                        ) -> list[PanelRecord]:
    return [replace(p, is_photographic=bool(predicate(p))) for p in panels]


@dataclass
class TextAssociation:
    panels: list[PanelRecord]
    orphans: list[tuple[int, str]] = field(default_factory=list)
    rerouted: list[int] = field(default_factory=list)
    describe_failures: int = 0


def _numbered(fragments: Sequence[CaptionFragment], indices: Sequence[int]) -> str:
    return "\n".join(f"[{i}] {fragments[i].text}" for i in indices)


def associate_text(figure: FigureRecord, panels: Sequence[PanelRecord], image,
                   client: LvlmClient, describe: bool = True) -> TextAssociation:
    if not panels:
        return TextAssociation([])
    fragments = split_fragments(figure.caption)
    idents = [p.identifier for p in panels]
    routing = route_fragments(fragments, idents)
    for idx, anchor in routing.orphans:
        log.info("figure %s: fragment %d anchors unknown panel %r", figure.figure_id, idx, anchor)

    # fragment index -> identifiers it belongs to (None means shared by all)
    placement: dict[int, Optional[list[str]]] = {}
    for idx, frag in enumerate(fragments):
        owners = [i for i, b in routing.buckets.items() if any(f is frag for f in b)]
        placement[idx] = owners or None

    rerouted: list[int] = []
    known = [i for i in routing.buckets]
    if routing.ambiguous and known:
        resp = client.request(LvlmRequest(
            "caption_segment",
            {"identifiers": ", ".join(known), "fragments": _numbered(fragments, routing.ambiguous)},
            meta={"figure_id": figure.figure_id, "ambiguous": list(routing.ambiguous)}))
        if resp.valid:
            by_key = {identifier_key(i): i for i in known}
            for a in resp.payload["assignments"]:
                idx = a["fragment"]
                if idx not in routing.ambiguous:
                    continue
                target = [by_key.get(identifier_key(x)) for x in a["panels"] if is_identifier(x)]
                target = [t for t in dict.fromkeys(target) if t is not None]
                if target and target != placement[idx]:
                    placement[idx] = target
                    rerouted.append(idx)

    out: list[PanelRecord] = []
    failures = 0
    for p in panels:
        assigned = [fragments[i].clean_text for i in range(len(fragments))
                    if placement[i] is None or (p.identifier is not None and p.identifier in placement[i])]
        desc = None
        if describe and p.is_photographic:
            slots = {"fragments": "\n".join(assigned) or "(none)"}
            if p.identifier is not None:
                slots["identifier"] = p.identifier
            resp = client.request(LvlmRequest.with_image(
                "panel_describe", slots, crop_px(image, p.bbox),
                meta={"figure_id": figure.figure_id, "panel_id": p.panel_id,
                      "panel_bbox": list(p.bbox.as_tuple())}))
            if resp.valid:
                desc = resp.payload["description"].strip()
            else:
                failures += 1
        out.append(replace(p, fragments=assigned, generated_description=desc))
    return TextAssociation(out, list(routing.orphans), rerouted, failures)
