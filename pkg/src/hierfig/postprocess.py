"""Region box cleanup before corpus emission.

Steps, in order: convert to panel pixels and clip; drop degenerate boxes
(tiny area or extreme aspect ratio); class-agnostic NMS; merge overlapping
boxes whose texts are near-duplicates. The last three steps repeat until
nothing changes, so the output is a fixpoint and cleanup is idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .corpus import BBox, RegionRecord
from .geometry import ScoredBox, clip_to, iou, merge_union, nms_indices
from .text import text_similarity


@dataclass(frozen=True)
class CleanupConfig:
    min_area_fraction: float = 1e-4
    aspect_ratio_range: tuple[float, float] = (0.05, 20.0)
    nms_iou: float = 0.7
    text_sim_threshold: float = 0.9

    def __post_init__(self):
        lo, hi = self.aspect_ratio_range
        if not 0.0 < self.min_area_fraction < 1.0:
            raise ValueError("min_area_fraction must lie in (0, 1)")
        if not 0.0 < lo < hi:
            raise ValueError("aspect_ratio_range needs 0 < lo < hi")
        if not 0.0 < self.nms_iou <= 1.0 or not 0.0 < self.text_sim_threshold <= 1.0:
            raise ValueError("thresholds must lie in (0, 1]")


@dataclass
class CleanupStats:
    input: int = 0
    clipped: int = 0
    degenerate: int = 0
    nms: int = 0
    merged: int = 0
    output: int = 0
    merges: list[tuple[str, str]] = field(default_factory=list)  # (kept id, absorbed id)

    def add(self, other: CleanupStats) -> None:
        for name in ("input", "clipped", "degenerate", "nms", "merged", "output"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.merges.extend(other.merges)

    def to_json(self) -> dict:
        return {"input": self.input, "removed": {"clip": self.clipped,
                "degenerate": self.degenerate, "nms": self.nms, "merge": self.merged},
                "output": self.output}


def region_text(r: RegionRecord) -> str:
    return " ".join(r.texts)


def _join_unique(*texts) -> str | None:
    parts: list[str] = []
    for t in texts:
        for piece in (t or "").split("\n"):
            piece = piece.strip()
            if piece and piece not in parts:
                parts.append(piece)
    return "\n".join(parts) if parts else None


def merge_regions(a: RegionRecord, b: RegionRecord) -> RegionRecord:
    """Hull box, texts concatenated without duplicates; ``a`` keeps its id."""
    return replace(
        a,
        bbox=merge_union([a.bbox, b.bbox]),
        provenance=a.provenance if a.provenance == b.provenance else "fused",
        grounded_subcaption=_join_unique(a.grounded_subcaption, b.grounded_subcaption),
        lvlm_caption=_join_unique(a.lvlm_caption, b.lvlm_caption),
    )


def is_degenerate(box: BBox, panel_w: float, panel_h: float, cfg: CleanupConfig) -> bool:
    lo, hi = cfg.aspect_ratio_range
    aspect = box.width / box.height
    return box.area < cfg.min_area_fraction * panel_w * panel_h or not lo < aspect < hi


def similarity_merge(regions: Sequence[RegionRecord], threshold: float,
                     sim: Callable[[str, str], float] = text_similarity
                     ) -> tuple[list[RegionRecord], list[tuple[str, str]]]:
    """Greedily merge the first qualifying pair in list order until none is left.

    A pair qualifies when the boxes overlap (IoU > 0) and their texts have
    similarity strictly above ``threshold``.
    """
    out = list(regions)
    log: list[tuple[str, str]] = []
    changed = True
    while changed:
        changed = False
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                if iou(out[i].bbox, out[j].bbox) > 0.0 and \
                        sim(region_text(out[i]), region_text(out[j])) > threshold:
                    log.append((out[i].region_id, out[j].region_id))
                    out[i] = merge_regions(out[i], out[j])
                    del out[j]
                    changed = True
                    break
            if changed:
                break
    return out, log


def cleanup(regions: Sequence[RegionRecord], panel_w: float, panel_h: float,
            cfg: CleanupConfig = CleanupConfig(),
            sim: Callable[[str, str], float] = text_similarity
            ) -> tuple[list[RegionRecord], CleanupStats]:
    stats = CleanupStats(input=len(regions))

    current: list[RegionRecord] = []
    for r in regions:
        box = clip_to(r.bbox.to_px(panel_w, panel_h), panel_w, panel_h)
        if box is None:
            stats.clipped += 1
            continue
        current.append(r if box == r.bbox else replace(r, bbox=box))

    while True:
        kept = [r for r in current if not is_degenerate(r.bbox, panel_w, panel_h, cfg)]
        stats.degenerate += len(current) - len(kept)

        # unscored boxes: priority is area (largest first), then input order
        scored = [ScoredBox(r.bbox, 0.0, r.region_id) for r in kept]
        order, _ = nms_indices(scored, cfg.nms_iou) if kept else ([], {})
        survivors = [kept[i] for i in order]
        stats.nms += len(kept) - len(survivors)

        merged, log = similarity_merge(survivors, cfg.text_sim_threshold, sim)
        stats.merged += len(survivors) - len(merged)
        stats.merges.extend(log)

        done = len(kept) == len(current) and len(survivors) == len(kept) and not log
        current = merged
        if done:
            break

    stats.output = len(current)
    return current, stats
