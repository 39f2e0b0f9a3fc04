"""Build the figset20 fixture: 20 drawn figures, their records, planted truth
and recorded model answers for mock-mode replay.

The answers come from an oracle responder that reads the planted truth, so
every recorded fixture is what a perfect model would have said about the
exact crop it was shown. Re-run after any change that alters request
hashes (crop geometry, prompt slots, template versions):

    python3 scripts/make_fixtures.py [--out fixtures/figset20]
"""

from __future__ import annotations

import argparse
import json
import math
import re
import shutil
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from hierfig.config import load_config
from hierfig.lvlm import LvlmClient, RecordingTransport
from hierfig.pipeline import Run, run_stage

PANEL = 200
GAP = 12
MARGIN = 12
SLOTS = ((0.3, 0.32), (0.72, 0.32), (0.3, 0.72), (0.72, 0.72))

TISSUES = ["colon mucosa", "liver parenchyma", "renal cortex", "lung alveoli", "skin epidermis",
           "lymph node", "breast duct", "cardiac muscle", "thyroid follicles", "gastric glands"]
PHRASES = ["necrotic focus", "blood vessel", "lymphoid aggregate", "mitotic figure", "gland lumen",
           "calcified nodule", "inflammatory infiltrate", "hemorrhage", "cyst", "granuloma",
           "fat droplet", "nerve bundle"]
PLOTS = ["bar plot of marker expression", "line chart of tumour volume", "scatter plot of cell counts"]
RECIPES = ["arrow_object", "isolated_marker", "far_object", "two_arrows", "duplicate_ground",
           "invisible", "overlap_pair", "sliver"]
# regions a recipe leaves in the final corpus, and boxes cleanup drops as degenerate
RECIPE_REGIONS = {"arrow_object": 1, "isolated_marker": 1, "far_object": 0, "two_arrows": 1,
                  "duplicate_ground": 1, "invisible": 0, "overlap_pair": 1, "sliver": 0}
RECIPE_DEGENERATE = {"sliver": 1}

# (rows, cols, labels, special); labels None means a single unlabeled panel, "*" a plot panel
LAYOUTS = [
    (1, 2, "A B", None),
    (2, 2, "A B C D", "bad_entry"),
    (1, 1, None, None),
    (1, 3, "A B C*", None),
    (2, 2, "I II III IV", None),
    (1, 2, "a b", "fenced"),
    (2, 2, "A B A C", None),
    (2, 2, "A B C D", "orphan"),
    (1, 2, "A B", "ambiguous"),
    (1, 3, "A B C", "invalid"),
    (1, 2, "A B", None),
    (2, 2, "A B C D", None),
    (1, 3, "A B C", None),
    (2, 3, "A B C D E F*", None),
    (1, 1, None, "fenced"),
    (1, 2, "A B*", None),
    (2, 2, "A B C D", None),
    (1, 3, "A B C", None),
    (2, 3, "A B C D E F", None),
    (1, 2, "A B", None),
]


@dataclass
class Marker:
    kind: str
    glyph: list  # figure px
    target: Optional[list] = None
    role: str = ""


@dataclass
class Thing:
    phrase: str
    boxes: list  # figure px boxes the grounding answer reports
    extent: list  # figure px box used to match region-caption requests
    visible: bool = True
    description: str = ""


@dataclass
class PanelTruth:
    label: Optional[str]
    bbox: list
    photographic: bool
    description: str
    tissue: str = ""
    recipes: list = field(default_factory=list)
    sentences: list = field(default_factory=list)
    markers: list = field(default_factory=list)
    things: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "label": self.label, "bbox": self.bbox, "photographic": self.photographic,
            "description": self.description, "tissue": self.tissue, "recipes": self.recipes,
            "markers": [vars(m) for m in self.markers],
            "objects": [vars(t) for t in self.things],
            "expected_regions": sum(RECIPE_REGIONS[r] for r in self.recipes),
            "expected_degenerate": sum(RECIPE_DEGENERATE.get(r, 0) for r in self.recipes),
        }


def _font():
    try:
        return ImageFont.load_default(size=16)
    except TypeError:
        return ImageFont.load_default()


def _texture(rng, w, h, base, spread) -> Image.Image:
    low = rng.uniform(-1, 1, (6, 6, 3))
    arr = np.clip(np.asarray(base)[None, None, :] + spread * low, 0, 255).astype(np.uint8)
    return Image.fromarray(arr, "RGB").resize((w, h), Image.BILINEAR)


def _plot(draw: ImageDraw.ImageDraw, x0, y0, rng) -> None:
    draw.rectangle([x0, y0, x0 + PANEL - 1, y0 + PANEL - 1], fill=(255, 255, 255))
    draw.line([x0 + 25, y0 + 20, x0 + 25, y0 + 175, x0 + 185, y0 + 175], fill=(0, 0, 0), width=2)
    for k in range(5):
        hgt = int(rng.integers(30, 140))
        bx = x0 + 35 + 30 * k
        draw.rectangle([bx, y0 + 175 - hgt, bx + 18, y0 + 174], fill=(70, 110, 180))


class Canvas:
    """Draws one panel's content and records the matching truth."""

    def __init__(self, draw, px, py, rng, truth: PanelTruth):
        self.draw, self.px, self.py, self.rng, self.t = draw, px, py, rng, truth

    def fig(self, u, v):
        return (self.px + u * PANEL, self.py + v * PANEL)

    def box(self, u0, v0, u1, v1):
        return [round(self.px + u0 * PANEL, 2), round(self.py + v0 * PANEL, 2),
                round(self.px + u1 * PANEL, 2), round(self.py + v1 * PANEL, 2)]

    def blob(self, cu, cv, ru, rv, color):
        self.draw.ellipse([*self.fig(cu - ru, cv - rv), *self.fig(cu + ru, cv + rv)], fill=color)
        return self.box(cu - ru, cv - rv, cu + ru, cv + rv)

    def arrow(self, cu, cv, du, dv, kind="arrow") -> Marker:
        tip = (cu + 0.035 * du, cv + 0.035 * dv)
        tail = (cu + 0.10 * du, cv + 0.10 * dv)
        pu, pv = -dv, du
        head = [tip, (tip[0] + 0.03 * du + 0.018 * pu, tip[1] + 0.03 * dv + 0.018 * pv),
                (tip[0] + 0.03 * du - 0.018 * pu, tip[1] + 0.03 * dv - 0.018 * pv)]
        color = (255, 230, 0)
        pts = list(head)
        if kind == "arrow":
            self.draw.line([self.fig(*tip), self.fig(*tail)], fill=color, width=3)
            pts.append(tail)
        self.draw.polygon([self.fig(*p) for p in head], fill=color)
        us, vs = [p[0] for p in pts], [p[1] for p in pts]
        return Marker(kind, self.box(min(us) - 0.005, min(vs) - 0.005, max(us) + 0.005, max(vs) + 0.005))

    def symbol(self, cu, cv, kind) -> Marker:
        r = 0.03
        color = (255, 255, 255)
        if kind == "asterisk":
            for a in (0, 60, 120):
                c, s = math.cos(math.radians(a)) * r, math.sin(math.radians(a)) * r
                self.draw.line([self.fig(cu - c, cv - s), self.fig(cu + c, cv + s)], fill=color, width=2)
        else:
            pts = []
            for k in range(10):
                rad = r if k % 2 == 0 else r * 0.45
                a = math.radians(-90 + 36 * k)
                pts.append(self.fig(cu + rad * math.cos(a), cv + rad * math.sin(a)))
            self.draw.polygon(pts, fill=color)
        return Marker(kind, self.box(cu - r - 0.005, cv - r - 0.005, cu + r + 0.005, cv + r + 0.005))

    def recipe(self, name, slot, phrase):
        cu, cv = slot
        rng = self.rng
        dirs = [(1, 0), (-1, 0), (0, 1), (0, -1)]
        du, dv = dirs[int(rng.integers(0, 4))]
        desc = f"a {phrase} in the {self.t.tissue}"
        dark = (70, 20, 90)
        if name in ("arrow_object", "duplicate_ground", "two_arrows"):
            kind = "arrowhead" if name == "arrow_object" and rng.random() < 0.5 else "arrow"
            ob = self.blob(cu, cv, 0.05, 0.045, dark)
            boxes = [ob]
            if name == "duplicate_ground":
                boxes.append([ob[0] + 1.5, ob[1] - 1.0, ob[2] + 1.0, ob[3] + 1.5])
            self.t.things.append(Thing(phrase, boxes, ob, True, desc))
            m = self.arrow(cu, cv, du, dv, kind)
            m.target = ob
            self.t.markers.append(m)
            if name == "two_arrows":
                m2 = self.arrow(cu, cv, -du, -dv, "arrow")
                m2.target = ob
                self.t.markers.append(m2)
                return f"Two arrows point to the {phrase}."
            noun = "Arrowheads" if kind == "arrowhead" else "Arrows"
            return f"{noun} mark the {phrase}."
        if name == "isolated_marker":
            kind = ["asterisk", "star"][int(rng.integers(0, 2))]
            m = self.symbol(cu, cv, kind)
            m.target = self.box(cu - 0.08, cv - 0.08, cu + 0.08, cv + 0.08)
            m.role = f"marks a {phrase}"
            self.t.markers.append(m)
            self.t.things.append(Thing(phrase, [m.target], m.target, False, desc))
            return f"The {kind} denotes a {phrase}."
        if name == "far_object":
            ob = self.blob(cu, cv, 0.06, 0.05, (120, 40, 60))
            self.t.things.append(Thing(phrase, [ob], ob, True, desc))
            return f"A {phrase} lies near the border."
        if name == "invisible":
            ghost = self.box(cu - 0.05, cv - 0.05, cu + 0.05, cv + 0.05)
            self.t.things.append(Thing(phrase, [ghost], ghost, False, desc))
            return f"No {phrase} is seen."
        if name == "overlap_pair":
            a = self.blob(cu - 0.05, cv, 0.09, 0.05, dark)
            b = self.blob(cu + 0.05, cv, 0.09, 0.05, dark)
            ext = [a[0], a[1], b[2], b[3]]
            self.t.things.append(Thing(phrase, [a, b], ext, True, desc))
            m = self.arrow(cu, cv, 0, -1 if cv > 0.5 else 1, "arrow")
            m.target = ext
            self.t.markers.append(m)
            return f"Arrows mark the paired {phrase}."
        if name == "sliver":
            self.draw.line([self.fig(cu - 0.2, cv), self.fig(cu + 0.2, cv)], fill=dark, width=2)
            ob = self.box(cu - 0.2, cv - 0.005, cu + 0.2, cv + 0.005)
            self.t.things.append(Thing(phrase, [ob], ob, True, desc))
            m = self.arrow(cu, cv, 0, 1, "arrow")
            m.target = ob
            self.t.markers.append(m)
            return f"The arrow marks a thin {phrase}."
        raise ValueError(name)


def build_figure(i: int, layout, recipe_iter, phrase_iter) -> tuple[dict, dict, Image.Image]:
    rows, cols, labels, special = layout
    rng = np.random.default_rng([7, i])
    fid = f"fig{i:02d}"
    W = 2 * MARGIN + cols * PANEL + (cols - 1) * GAP
    H = 2 * MARGIN + rows * PANEL + (rows - 1) * GAP
    img = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    font = _font()
    toks = labels.split() if labels else [None]
    panels: list[PanelTruth] = []
    for k, tok in enumerate(toks):
        r, c = divmod(k, cols)
        px, py = MARGIN + c * (PANEL + GAP), MARGIN + r * (PANEL + GAP)
        bbox = [px, py, px + PANEL, py + PANEL]
        label = tok.rstrip("*") if tok else None
        if tok and tok.endswith("*"):
            _plot(draw, px, py, rng)
            t = PanelTruth(label, bbox, False, PLOTS[int(rng.integers(0, len(PLOTS)))].capitalize())
            t.sentences = [f"{t.description} across treatment groups."]
        else:
            tissue = TISSUES[int(rng.integers(0, len(TISSUES)))]
            stain = ["H&E", "trichrome", "PAS"][int(rng.integers(0, 3))]
            img.paste(_texture(rng, PANEL, PANEL, (215, 140, 185), 40), (px, py))
            t = PanelTruth(label, bbox, True, f"{stain} stained micrograph of {tissue}", tissue)
            t.sentences = [f"{stain} section of {tissue}."]
            canvas = Canvas(draw, px, py, rng, t)
            n_rec = 1 + int(rng.integers(0, 3))
            slots = [SLOTS[s] for s in rng.permutation(len(SLOTS))[:n_rec]]
            for slot in slots:
                name = next(recipe_iter)
                t.recipes.append(name)
                t.sentences.append(canvas.recipe(name, slot, next(phrase_iter)))
        if label:
            draw.rectangle([px + 2, py + 2, px + 22, py + 22], fill=(255, 255, 255))
            draw.text((px + 5, py + 3), label, fill=(0, 0, 0), font=font)
        panels.append(t)

    parts = [f"Histology panel set {i} from a synthetic study."]
    for t in panels:
        body = " ".join(t.sentences)
        parts.append(f"({t.label}) {body}" if t.label else body)
    orphan_target = None
    if special == "orphan":
        parts.append("(E) Inset of the boxed area at higher magnification.")
        orphan_target = panels[-1].label
    if special == "ambiguous":
        parts.append("(A and B) Both panels share the same scale bar.")
    caption = " ".join(parts)

    record = {"figure_id": fid, "image_path": f"images/{fid}.png", "caption": caption,
              "article_title": f"Synthetic histology study {i}", "width_px": W, "height_px": H,
              "license_tag": "CC0"}
    invalid = special == "invalid"
    seen: dict[str, int] = {}
    for t in panels:
        if t.label:
            seen[t.label.upper()] = seen.get(t.label.upper(), 0) + 1
    truth = {
        "figure_id": fid, "special": special, "invalid": invalid, "orphan_target": orphan_target,
        "panels": [t.to_json() for t in panels],
        "expected": {
            "panels": 0 if invalid else len(panels),
            "photographic_panels": 0 if invalid else sum(t.photographic for t in panels),
            "duplicate_identifier": 0 if invalid else sum(n for n in seen.values() if n > 1),
            "regions": 0 if invalid else sum(t.to_json()["expected_regions"] for t in panels),
            "degenerate": 0 if invalid else sum(t.to_json()["expected_degenerate"] for t in panels),
        },
    }
    return record, truth, img


# ------------------------------------------------------------------ oracle

def _iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _rel(box, frame) -> Optional[list]:
    """``box`` (figure px) normalized to ``frame`` (figure px), clipped to [0, 1]."""
    fw, fh = frame[2] - frame[0], frame[3] - frame[1]
    x0 = min(max((box[0] - frame[0]) / fw, 0.0), 1.0)
    y0 = min(max((box[1] - frame[1]) / fh, 0.0), 1.0)
    x1 = min(max((box[2] - frame[0]) / fw, 0.0), 1.0)
    y1 = min(max((box[3] - frame[1]) / fh, 0.0), 1.0)
    if x1 <= x0 or y1 <= y0:
        return None
    return [round(x0, 4), round(y0, 4), round(x1, 4), round(y1, 4)]


class Oracle:
    """Answers every template from the planted truth."""

    def __init__(self, truths: dict):
        self.truths = truths

    def complete(self, request, prompt: str) -> str:
        truth = self.truths[request.meta["figure_id"]]
        if truth["invalid"]:
            return "I am unable to analyse this figure."
        fn = getattr(self, request.template_id)
        return fn(request, truth)

    def _panel(self, request, truth) -> dict:
        pb = request.meta["panel_bbox"]
        return max(truth["panels"], key=lambda p: _iou(p["bbox"], pb))

    def panel_decompose(self, request, truth) -> str:
        crop = request.meta["crop"]
        view = request.meta["view"]
        out = []
        for k, p in enumerate(truth["panels"]):
            b = p["bbox"]
            area = (b[2] - b[0]) * (b[3] - b[1])
            vis = [max(b[0], crop[0]), max(b[1], crop[1]), min(b[2], crop[2]), min(b[3], crop[3])]
            if vis[2] <= vis[0] or vis[3] <= vis[1]:
                continue
            if (vis[2] - vis[0]) * (vis[3] - vis[1]) < 0.9 * area:
                continue
            jr = np.random.default_rng(zlib.crc32(f"{truth['figure_id']}|{view}|{k}".encode()))
            jit = [v + float(jr.uniform(-1.5, 1.5)) for v in vis]
            box = _rel(jit, crop)
            if box is None:
                continue
            out.append({"id": p["label"], "bbox": box, "description": p["description"]})
        if truth["special"] == "bad_entry" and view == 0:
            out.append({"id": "Z", "bbox": [0.4, 0.4, 1.3, 0.9], "description": "spurious"})
        layout = "single" if len(truth["panels"]) == 1 else "grid"
        text = json.dumps({"layout": layout, "panels": out})
        if truth["special"] == "fenced":
            text = "Here is the decomposition:\n```json\n" + text + "\n```"
        return text

    def caption_segment(self, request, truth) -> str:
        known = [s.strip() for s in request.slots["identifiers"].split(",")]
        out = []
        for line in request.slots["fragments"].splitlines():
            m = re.match(r"\[(\d+)\]\s*(.*)", line)
            if not m:
                continue
            idx, text = int(m.group(1)), m.group(2)
            named = [k for k in known if re.search(rf"\({k}\b|\b{k}\)|\band {k}\b", text)]
            if not named and truth["orphan_target"]:
                named = [truth["orphan_target"]]
            out.append({"fragment": idx, "panels": named})
        return json.dumps({"assignments": out})

    def panel_describe(self, request, truth) -> str:
        p = self._panel(request, truth)
        return json.dumps({"description": f"Light micrograph showing {p['tissue']} at moderate magnification."})

    def marker_detect(self, request, truth) -> str:
        p = self._panel(request, truth)
        pb = request.meta["panel_bbox"]
        out = []
        for m in p["markers"]:
            g = _rel(m["glyph"], pb)
            if g is None:
                continue
            out.append({"kind": m["kind"], "glyph_bbox": g,
                        "target_bbox": _rel(m["target"], pb) if m["target"] else None,
                        "role": m["role"] or "points at a structure of interest"})
        return json.dumps({"markers": out})

    def caption_ground(self, request, truth) -> str:
        p = self._panel(request, truth)
        pb = request.meta["panel_bbox"]
        frags = {}
        for line in request.slots["fragments"].splitlines():
            m = re.match(r"\[(\d+)\]\s*(.*)", line)
            if m:
                frags[int(m.group(1))] = m.group(2).lower()
        out = []
        for t in p["objects"]:
            idx = next((i for i, txt in sorted(frags.items()) if t["phrase"] in txt), None)
            if idx is None:
                continue
            for b in t["boxes"]:
                rb = _rel(b, pb)
                if rb is None:
                    continue
                out.append({"fragment": idx, "phrase": t["phrase"], "bbox": rb,
                            "visible": t["visible"], "description": t["description"]})
        return json.dumps({"objects": out})

    def region_caption(self, request, truth) -> str:
        p = self._panel(request, truth)
        pb = request.meta["panel_bbox"]
        rb = request.meta["region_bbox"]
        cx, cy = pb[0] + (rb[0] + rb[2]) / 2, pb[1] + (rb[1] + rb[3]) / 2
        for t in p["objects"]:
            e = t["extent"]
            if e[0] - 2 <= cx <= e[2] + 2 and e[1] - 2 <= cy <= e[3] + 2:
                return json.dumps({"caption": f"Close view of {t['description']}."})
        return json.dumps({"caption": f"Close view of {p['tissue']} texture."})


# ------------------------------------------------------------------ main

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "fixtures" / "figset20"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    for sub in ("images", "truth", "mock"):
        shutil.rmtree(out / sub, ignore_errors=True)
        (out / sub).mkdir(parents=True)

    recipe_iter = iter(RECIPES * 20)
    phrase_iter = iter(PHRASES * 40)
    records, truths = [], {}
    for i, layout in enumerate(LAYOUTS):
        rec, truth, img = build_figure(i, layout, recipe_iter, phrase_iter)
        img.save(out / rec["image_path"], format="PNG", optimize=False)
        (out / "truth" / f"{rec['figure_id']}.json").write_text(
            json.dumps(truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        records.append(rec)
        truths[rec["figure_id"]] = truth
    (out / "figures.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")

    with tempfile.TemporaryDirectory() as work:
        cfg = load_config(None, [f"paths.figures={out / 'figures.jsonl'}", f"paths.work_dir={work}",
                                 f"lvlm.mock_dir={out / 'mock'}"])
        lv = cfg["lvlm"]
        client = LvlmClient(RecordingTransport(Oracle(truths), out / "mock"), lv["retry_limit"],
                            lv["transport_retries"], 0.0, lv["max_in_flight"],
                            sampling_overrides=lv["sampling"])
        run = Run(cfg, client=client)
        for stage in ("parse-panels", "associate-text", "mine-regions"):
            print(stage, json.dumps(run_stage(run, stage), sort_keys=True))
    n = len(list((out / "mock").glob("*.json")))
    print(f"wrote {len(records)} figures and {n} recorded answers to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
