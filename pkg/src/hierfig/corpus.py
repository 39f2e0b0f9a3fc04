"""Hierarchical corpus records and the line-delimited manifest format.

A manifest is UTF-8 text, one JSON object per line. The first line is a
header::

    {"level":"header","format_version":1,"stats":{"M":2,"P":5,"R":9}}

followed by figure (``"M"``), panel (``"P"``) and region (``"R"``) records, in
that order. ``level`` is always the first key; remaining keys follow the
dataclass field order below. Panel boxes are in figure pixels, region boxes
in *panel* pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

FORMAT_VERSION = 1
LEVELS = ("M", "P", "R")
PROVENANCES = ("marker", "caption", "fused")
_EPS = 1e-9


class ManifestError(Exception):
    """Base class for manifest read/write failures."""


class ManifestFormatError(ManifestError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownVersionError(ManifestError):
    pass


class DanglingLinkError(ManifestError):
    def __init__(self, record_id: str, missing: str):
        super().__init__(f"{record_id} links to missing parent {missing!r}")
        self.record_id = record_id
        self.missing = missing


class InvalidManifestError(ManifestError):
    def __init__(self, violations: list[Violation]):
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"{len(violations)} invariant violation(s): {head}{more}")
        self.violations = violations


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    unit: str = "px"

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.unit not in ("px", "norm"):
            raise ValueError(f"unknown unit flag {self.unit!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if self.unit == "norm" and not (
            0.0 <= self.x_min and self.x_max <= 1.0 and 0.0 <= self.y_min and self.y_max <= 1.0
        ):
            raise ValueError(f"normalized box outside [0,1]: {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_norm(self, width: float, height: float) -> BBox:
        if self.unit == "norm":
            return self
        return BBox(
            min(max(self.x_min / width, 0.0), 1.0),
            min(max(self.y_min / height, 0.0), 1.0),
            min(max(self.x_max / width, 0.0), 1.0),
            min(max(self.y_max / height, 0.0), 1.0),
            unit="norm",
        )

    def to_px(self, width: float, height: float) -> BBox:
        if self.unit == "px":
            return self
        return BBox(self.x_min * width, self.y_min * height,
                    self.x_max * width, self.y_max * height, unit="px")

    def to_json(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max,
                "y_max": self.y_max, "unit": self.unit}

    @classmethod
    def from_json(cls, d: dict) -> BBox:
        return cls(d["x_min"], d["y_min"], d["x_max"], d["y_max"], d.get("unit", "px"))


@dataclass
class FigureRecord:
    figure_id: str
    image_path: str
    caption: str
    width_px: int
    height_px: int
    license_tag: str = ""
    article_title: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "figure_id": self.figure_id,
            "image_path": self.image_path,
            "caption": self.caption,
            "article_title": self.article_title,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "license_tag": self.license_tag,
        }

    @classmethod
    def from_json(cls, d: dict) -> FigureRecord:
        return cls(
            figure_id=d["figure_id"],
            image_path=d["image_path"],
            caption=d["caption"],
            width_px=int(d["width_px"]),
            height_px=int(d["height_px"]),
            license_tag=d.get("license_tag", ""),
            article_title=d.get("article_title"),
        )


@dataclass
class PanelRecord:
    panel_id: str
    parent_figure: str
    bbox: BBox
    identifier: Optional[str] = None
    fragments: list[str] = field(default_factory=list)
    generated_description: Optional[str] = None
    is_photographic: bool = True
    votes: float = 1.0
    proposal_description: Optional[str] = None
    flags: list[str] = field(default_factory=list)

    @property
    def caption(self) -> str:
        """Panel caption: assigned fragments followed by the generated description."""
        parts = list(self.fragments)
        if self.generated_description:
            parts.append(self.generated_description)
        return " ".join(p.strip() for p in parts if p.strip())

    def to_json(self) -> dict:
        return {
            "panel_id": self.panel_id,
            "parent_figure": self.parent_figure,
            "identifier": self.identifier,
            "bbox": self.bbox.to_json(),
            "fragments": list(self.fragments),
            "generated_description": self.generated_description,
            "is_photographic": self.is_photographic,
            "votes": float(self.votes),
            "proposal_description": self.proposal_description,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, d: dict) -> PanelRecord:
        return cls(
            panel_id=d["panel_id"],
            parent_figure=d["parent_figure"],
            bbox=BBox.from_json(d["bbox"]),
            identifier=d.get("identifier"),
            fragments=list(d.get("fragments", [])),
            generated_description=d.get("generated_description"),
            is_photographic=bool(d.get("is_photographic", True)),
            votes=float(d.get("votes", 1.0)),
            proposal_description=d.get("proposal_description"),
            flags=list(d.get("flags", [])),
        )


@dataclass
class RegionRecord:
    region_id: str
    parent_panel: str
    bbox: BBox
    provenance: str
    grounded_subcaption: Optional[str] = None
    lvlm_caption: Optional[str] = None

    @property
    def texts(self) -> list[str]:
        return [t for t in (self.grounded_subcaption, self.lvlm_caption) if t]

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "parent_panel": self.parent_panel,
            "bbox": self.bbox.to_json(),
            "provenance": self.provenance,
            "grounded_subcaption": self.grounded_subcaption,
            "lvlm_caption": self.lvlm_caption,
        }

    @classmethod
    def from_json(cls, d: dict) -> RegionRecord:
        return cls(
            region_id=d["region_id"],
            parent_panel=d["parent_panel"],
            bbox=BBox.from_json(d["bbox"]),
            provenance=d["provenance"],
            grounded_subcaption=d.get("grounded_subcaption"),
            lvlm_caption=d.get("lvlm_caption"),
        )


@dataclass
class CorpusManifest:
    figures: list[FigureRecord] = field(default_factory=list)
    panels: list[PanelRecord] = field(default_factory=list)
    regions: list[RegionRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def stats(self) -> dict[str, int]:
        return {"M": len(self.figures), "P": len(self.panels), "R": len(self.regions)}

    def figure_index(self) -> dict[str, FigureRecord]:
        return {f.figure_id: f for f in self.figures}

    def panel_index(self) -> dict[str, PanelRecord]:
        return {p.panel_id: p for p in self.panels}

    def panels_of(self, figure_id: str) -> list[PanelRecord]:
        return [p for p in self.panels if p.parent_figure == figure_id]

    def regions_of(self, panel_id: str) -> list[RegionRecord]:
        return [r for r in self.regions if r.parent_panel == panel_id]

    def subset(self, figure_ids: Iterable[str]) -> CorpusManifest:
        """Figures in ``figure_ids`` with all their descendants, order preserved."""
        keep = set(figure_ids)
        panels = [p for p in self.panels if p.parent_figure in keep]
        pids = {p.panel_id for p in panels}
        return CorpusManifest(
            figures=[f for f in self.figures if f.figure_id in keep],
            panels=panels,
            regions=[r for r in self.regions if r.parent_panel in pids],
            format_version=self.format_version,
        )


@dataclass(frozen=True)
class Violation:
    kind: str  # uniqueness | containment | link | identifier | text | value
    record_id: str
    message: str

    def __str__(self) -> str:
        return f"[{self.kind}] {self.record_id}: {self.message}"


def _inside(box: BBox, width: float, height: float) -> bool:
    if box.unit == "norm":
        return True  # range already enforced by BBox
    return (box.x_min >= -_EPS and box.y_min >= -_EPS
            and box.x_max <= width + _EPS and box.y_max <= height + _EPS)


def validate_hierarchy(manifest: CorpusManifest) -> list[Violation]:
    """Every invariant violation in ``manifest``; empty iff well-formed."""
    from .captions import is_identifier

    out: list[Violation] = []
    figs: dict[str, FigureRecord] = {}
    for f in manifest.figures:
        if f.figure_id in figs:
            out.append(Violation("uniqueness", f.figure_id, "duplicate figure_id"))
            continue
        figs[f.figure_id] = f
        if f.width_px < 1 or f.height_px < 1:
            out.append(Violation("value", f.figure_id, "non-positive image size"))
        if not f.caption or not f.caption.strip():
            out.append(Violation("value", f.figure_id, "empty caption"))

    panels: dict[str, PanelRecord] = {}
    for p in manifest.panels:
        if p.panel_id in panels:
            out.append(Violation("uniqueness", p.panel_id, "duplicate panel_id"))
            continue
        panels[p.panel_id] = p
        parent = figs.get(p.parent_figure)
        if parent is None:
            out.append(Violation("link", p.panel_id, f"missing parent figure {p.parent_figure!r}"))
        elif not _inside(p.bbox, parent.width_px, parent.height_px):
            out.append(Violation("containment", p.panel_id, "bbox exceeds parent figure bounds"))
        if p.identifier is not None and not is_identifier(p.identifier):
            out.append(Violation("identifier", p.panel_id, f"bad identifier {p.identifier!r}"))

    seen_regions: set[str] = set()
    for r in manifest.regions:
        if r.region_id in seen_regions:
            out.append(Violation("uniqueness", r.region_id, "duplicate region_id"))
            continue
        seen_regions.add(r.region_id)
        parent = panels.get(r.parent_panel)
        if parent is None:
            out.append(Violation("link", r.region_id, f"missing parent panel {r.parent_panel!r}"))
        elif not _inside(r.bbox, parent.bbox.width, parent.bbox.height):
            out.append(Violation("containment", r.region_id, "bbox exceeds parent panel bounds"))
        if r.provenance not in PROVENANCES:
            out.append(Violation("value", r.region_id, f"unknown provenance {r.provenance!r}"))
        if not r.texts:
            out.append(Violation("text", r.region_id, "region has neither sub-caption nor LVLM caption"))
    return out


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def manifest_lines(manifest: CorpusManifest) -> list[str]:
    lines = [_dumps({"level": "header", "format_version": manifest.format_version,
                     "stats": manifest.stats})]
    for level, records in (("M", manifest.figures), ("P", manifest.panels), ("R", manifest.regions)):
        for rec in records:
            lines.append(_dumps({"level": level, **rec.to_json()}))
    return lines


def write_manifest(manifest: CorpusManifest, path) -> None:
    """Validate, then write ``manifest`` to ``path``; nothing is written on violations."""
    violations = validate_hierarchy(manifest)
    if violations:
        raise InvalidManifestError(violations)
    text = "\n".join(manifest_lines(manifest)) + "\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        raw_lines = fh.read().split("\n")
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise ManifestFormatError(1, "empty file (missing header)")

    parsed = []
    for no, line in enumerate(raw_lines, start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestFormatError(no, f"malformed record ({exc.msg})") from None
        if not isinstance(obj, dict) or "level" not in obj:
            raise ManifestFormatError(no, "record is not a level-tagged object")
        parsed.append((no, obj))

    _, header = parsed[0]
    if header.get("level") != "header":
        raise ManifestFormatError(1, "first record must be the header")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownVersionError(f"unsupported format_version {version!r}")

    m = CorpusManifest(format_version=version)
    builders = {"M": (FigureRecord, m.figures), "P": (PanelRecord, m.panels),
                "R": (RegionRecord, m.regions)}
    for no, obj in parsed[1:]:
        level = obj.pop("level")
        if level not in builders:
            raise ManifestFormatError(no, f"unknown level tag {level!r}")
        cls, bucket = builders[level]
        try:
            bucket.append(cls.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestFormatError(no, f"bad {level} record: {exc}") from None

    stats = header.get("stats", {})
    if stats != m.stats:
        raise ManifestFormatError(1, f"header stats {stats} disagree with records {m.stats}")

    fig_ids = {f.figure_id for f in m.figures}
    for p in m.panels:
        if p.parent_figure not in fig_ids:
            raise DanglingLinkError(p.panel_id, p.parent_figure)
    panel_ids = {p.panel_id for p in m.panels}
    for r in m.regions:
        if r.parent_panel not in panel_ids:
            raise DanglingLinkError(r.region_id, r.parent_panel)
    return m
