"""Deterministic stand-in features and the per-level training tables.

Image rows: an 8x8 grey-level grid (box-filtered, scaled to [0, 1]) followed
by an 8-bin histogram per RGB channel (each channel sums to 1), 88 values.
Text rows: 256 hashed character-trigram counts, L2-normalized. Panel
feature maps: the panel crop box-filtered to 8x8 RGB in [0, 1].

Synthetic corpora bypass pixels: their image rows and maps are read from
the feature store written next to the manifest, keyed by record id.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .corpus import CorpusManifest
from .imaging import crop_px, load_image
from .text import trigram_vector

IMAGE_GRID = 8
HIST_BINS = 8
IMAGE_DIM = IMAGE_GRID * IMAGE_GRID + 3 * HIST_BINS
TEXT_DIM = 256
MAP_GRID = 8
SYNTH_PREFIX = "synth:"


class FeatureError(ValueError):
    pass


def image_features(image: Image.Image) -> np.ndarray:
    rgb = image.convert("RGB")
    grey = np.asarray(rgb.convert("L").resize((IMAGE_GRID, IMAGE_GRID), Image.BOX),
                      dtype=np.float64).ravel() / 255.0
    px = np.asarray(rgb, dtype=np.int64).reshape(-1, 3)
    hist = np.zeros((3, HIST_BINS))
    for c in range(3):
        hist[c] = np.bincount(px[:, c] * HIST_BINS // 256, minlength=HIST_BINS) / len(px)
    return np.concatenate([grey, hist.ravel()])


def feature_map(image: Image.Image, grid: int = MAP_GRID) -> np.ndarray:
    return np.asarray(image.convert("RGB").resize((grid, grid), Image.BOX), dtype=np.float64) / 255.0


def text_features(text: str) -> np.ndarray:
    v = trigram_vector(text or "", TEXT_DIM)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def toy_featurize(image, text: str, store: Optional[SynthStore] = None) -> tuple[np.ndarray, np.ndarray]:
    """Image (PIL image, encoded bytes, or ``synth:<id>`` descriptor) and text to raw rows."""
    if isinstance(image, str) and image.startswith(SYNTH_PREFIX):
        if store is None:
            raise FeatureError("synthetic descriptor without a feature store")
        row = store.image_row(image[len(SYNTH_PREFIX):])
    else:
        if isinstance(image, (bytes, bytearray)):
            try:
                with Image.open(io.BytesIO(image)) as im:
                    image = im.convert("RGB")
            except Exception as exc:
                raise FeatureError(f"undecodable image: {exc}") from exc
        row = image_features(image)
    return row, text_features(text)


class SynthStore:
    """Image rows and panel maps of a synthetic corpus, keyed by record id."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays
        self._row: dict[str, tuple[str, int]] = {}
        for level in ("figure", "panel", "region"):
            for i, rid in enumerate(arrays[f"{level}_ids"]):
                self._row[str(rid)] = (level, i)
        self._map = {str(rid): i for i, rid in enumerate(arrays["panel_ids"])}

    @classmethod
    def load(cls, path) -> SynthStore:
        with np.load(path, allow_pickle=False) as z:
            return cls({k: z[k] for k in z.files})

    def image_row(self, record_id: str) -> np.ndarray:
        try:
            level, i = self._row[record_id]
        except KeyError:
            raise FeatureError(f"no synthetic features for {record_id!r}") from None
        return self.arrays[f"{level}_image"][i]

    def panel_map(self, panel_id: str) -> np.ndarray:
        return self.arrays["panel_maps"][self._map[panel_id]]


@dataclass
class TrainingTables:
    """Raw feature rows for every trainable item, aligned with the id lists."""
    figure_ids: list[str]
    figure_image: np.ndarray
    figure_text: np.ndarray
    panel_ids: list[str]
    panel_image: np.ndarray
    panel_text: np.ndarray  # fragments plus generated description
    panel_text_short: np.ndarray  # fragments only (evaluation text)
    panel_parent: np.ndarray
    panel_maps: np.ndarray
    region_ids: list[str]
    region_image: np.ndarray
    region_text_sub: np.ndarray
    region_text_lvlm: np.ndarray
    region_has_sub: np.ndarray
    region_has_lvlm: np.ndarray
    region_parent: np.ndarray
    region_boxes: np.ndarray  # panel-normalized

    def count(self, level: str) -> int:
        return {"M": len(self.figure_ids), "P": len(self.panel_ids), "R": len(self.region_ids)}[level]

    def children_of_figures(self, fig_rows: np.ndarray) -> np.ndarray:
        return np.flatnonzero(np.isin(self.panel_parent, fig_rows))

    def children_of_panels(self, panel_rows: np.ndarray) -> np.ndarray:
        return np.flatnonzero(np.isin(self.region_parent, panel_rows))


def build_tables(manifest: CorpusManifest, image_root=None,
                 store: Optional[SynthStore] = None) -> TrainingTables:
    """Featurize a manifest; non-photographic panels and their regions are left out."""
    figs = manifest.figures
    fig_row = {f.figure_id: i for i, f in enumerate(figs)}
    panels = [p for p in manifest.panels if p.is_photographic and p.parent_figure in fig_row]
    panel_row = {p.panel_id: i for i, p in enumerate(panels)}
    regions = [r for r in manifest.regions if r.parent_panel in panel_row]

    fig_img, pan_img, pan_map, reg_img = [], [], [], []
    fig_index = manifest.figure_index()
    images: dict[str, Image.Image] = {}
    panel_crops: dict[str, Image.Image] = {}

    def figure_image(fid):
        if fid not in images:
            images.clear()  # one figure at a time keeps memory flat
            images[fid] = load_image(fig_index[fid].image_path, image_root)
        return images[fid]

    for f in figs:
        if f.image_path.startswith(SYNTH_PREFIX):
            fig_img.append(toy_featurize(f.image_path, "", store)[0])
        else:
            fig_img.append(image_features(figure_image(f.figure_id)))
    for p in panels:
        if fig_index[p.parent_figure].image_path.startswith(SYNTH_PREFIX):
            pan_img.append(toy_featurize(SYNTH_PREFIX + p.panel_id, "", store)[0])
            pan_map.append(store.panel_map(p.panel_id))
        else:
            crop = crop_px(figure_image(p.parent_figure), p.bbox)
            panel_crops[p.panel_id] = crop
            pan_img.append(image_features(crop))
            pan_map.append(feature_map(crop))
    boxes = []
    for r in regions:
        p = panels[panel_row[r.parent_panel]]
        boxes.append(r.bbox.to_norm(p.bbox.width, p.bbox.height).as_tuple())
        if fig_index[p.parent_figure].image_path.startswith(SYNTH_PREFIX):
            reg_img.append(toy_featurize(SYNTH_PREFIX + r.region_id, "", store)[0])
        else:
            reg_img.append(image_features(crop_px(panel_crops[p.panel_id], r.bbox)))

    def rows(xs, width):
        return np.array(xs, dtype=np.float64).reshape(len(xs), width)

    img_w = len(fig_img[0]) if fig_img else IMAGE_DIM
    map_shape = pan_map[0].shape if pan_map else (MAP_GRID, MAP_GRID, 3)
    return TrainingTables(
        figure_ids=[f.figure_id for f in figs],
        figure_image=rows(fig_img, img_w),
        figure_text=rows([text_features(f.caption) for f in figs], TEXT_DIM),
        panel_ids=[p.panel_id for p in panels],
        panel_image=rows(pan_img, img_w),
        panel_text=rows([text_features(p.caption) for p in panels], TEXT_DIM),
        panel_text_short=rows([text_features(" ".join(p.fragments)) for p in panels], TEXT_DIM),
        panel_parent=np.array([fig_row[p.parent_figure] for p in panels], dtype=np.int64),
        panel_maps=np.array(pan_map, dtype=np.float64).reshape((len(pan_map),) + tuple(map_shape)),
        region_ids=[r.region_id for r in regions],
        region_image=rows(reg_img, img_w),
        region_text_sub=rows([text_features(r.grounded_subcaption or "") for r in regions], TEXT_DIM),
        region_text_lvlm=rows([text_features(r.lvlm_caption or "") for r in regions], TEXT_DIM),
        region_has_sub=np.array([bool(r.grounded_subcaption) for r in regions], dtype=bool),
        region_has_lvlm=np.array([bool(r.lvlm_caption) for r in regions], dtype=bool),
        region_parent=np.array([panel_row[r.parent_panel] for r in regions], dtype=np.int64),
        region_boxes=np.array(boxes, dtype=np.float64).reshape(len(boxes), 4),
    )
