"""Synthetic hierarchical corpora with planted figure/panel/region structure.

Every figure draws a latent code ``z_M ~ N(0, I)``; each panel perturbs
its parent (``z_P = z_M + sigma_panel * eps``) and each region perturbs its
panel likewise. An item's image row and its text are two independent noisy
views of its code. Image rows mix the code through a shared matrix plus a
level-specific one, so transfer between levels is partial. Texts are
token strings: every text coordinate is quantized into one of eight bins
and written as a letter-digit token (``"c5"``), so they travel through the
same trigram featurizer as real captions.

Panel feature maps are 6x6 cells holding the panel code projected to
``map_channels`` values, with each region's quadrant (3x3 cells) holding
the region code instead.
"""

from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import write_npz
from .corpus import BBox, CorpusManifest, FigureRecord, PanelRecord, RegionRecord, write_manifest
from .features import SYNTH_PREFIX

MAP_CELLS = 6
PANEL_PX = 300
N_BINS = 8
QUADRANTS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class SynthSpec:
    n_figures: int = 64
    panels_per_figure: tuple[int, int] = (3, 3)
    regions_per_panel: tuple[int, int] = (3, 3)
    latent_dim: int = 8
    image_dim: int = 24
    text_dim: int = 12
    map_channels: int = 4
    sigma: float = 0.3  # observation noise on every view
    sigma_panel: float = 0.6  # panel code = figure code + sigma_panel * eps
    sigma_region: float = 0.6
    level_mix: float = 0.5  # scale of the level-specific mixing matrices
    seed: int = 0

    def __post_init__(self):
        for name in ("panels_per_figure", "regions_per_panel"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a positive range, got {(lo, hi)}")
        if self.regions_per_panel[1] > len(QUADRANTS):
            raise ValueError("at most 4 regions per panel (one per quadrant)")
        if min(self.n_figures, self.latent_dim, self.image_dim, self.text_dim, self.map_channels) < 1:
            raise ValueError("sizes must be positive")
        if self.text_dim > len(string.ascii_lowercase):
            raise ValueError("text_dim is limited to 26 token letters")
        if min(self.sigma, self.sigma_panel, self.sigma_region, self.level_mix) < 0:
            raise ValueError("noise levels must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        d = dict(d)
        for k in ("panels_per_figure", "regions_per_panel"):
            if k in d:
                v = d[k]
                d[k] = (int(v), int(v)) if isinstance(v, (int, float)) else tuple(int(x) for x in v)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["panels_per_figure"] = list(self.panels_per_figure)
        out["regions_per_panel"] = list(self.regions_per_panel)
        return out


@dataclass
class SynthCorpus:
    manifest: CorpusManifest
    arrays: dict[str, np.ndarray] = field(default_factory=dict)  # feature store and latents

    def latents(self, level: str) -> np.ndarray:
        return self.arrays[f"z_{level}"]


class _Mixers:
    def __init__(self, spec: SynthSpec):
        rng = np.random.default_rng([spec.seed, 0])
        k = spec.latent_dim
        self.img = rng.normal(0, 1 / np.sqrt(k), (spec.image_dim, k))
        self.txt = rng.normal(0, 1 / np.sqrt(k), (spec.text_dim, k))
        self.img_level = {lvl: rng.normal(0, spec.level_mix / np.sqrt(k), (spec.image_dim, k)) for lvl in "MPR"}
        self.txt_level = {lvl: rng.normal(0, spec.level_mix / np.sqrt(k), (spec.text_dim, k)) for lvl in "MPR"}
        self.map = rng.normal(0, 1 / np.sqrt(k), (spec.map_channels, k))
        var = {"M": 1.0, "P": 1.0 + spec.sigma_panel ** 2,
               "R": 1.0 + spec.sigma_panel ** 2 + spec.sigma_region ** 2}
        # bin edges follow each text coordinate's marginal spread
        self.edges = {}
        for lvl in "MPR":
            mix = self.txt + self.txt_level[lvl]
            std = np.sqrt(var[lvl] * (mix ** 2).sum(axis=1) + spec.sigma ** 2)
            self.edges[lvl] = std[:, None] * np.linspace(-1.5, 1.5, N_BINS - 1)[None, :]


def _tokens(y: np.ndarray, edges: np.ndarray) -> str:
    bins = [int(np.searchsorted(edges[i], y[i])) for i in range(len(y))]
    return " ".join(f"{string.ascii_lowercase[i]}{b}" for i, b in enumerate(bins))


def generate(spec: SynthSpec) -> SynthCorpus:
    mx = _Mixers(spec)
    s = spec.sigma
    figures, panels, regions = [], [], []
    fig_img, pan_img, pan_maps, reg_img = [], [], [], []
    zM, zP, zR = [], [], []

    for i in range(spec.n_figures):
        rng = np.random.default_rng([spec.seed, 1, i])
        fid = f"syn{i:04d}"
        n_p = int(rng.integers(spec.panels_per_figure[0], spec.panels_per_figure[1] + 1))
        z = rng.normal(size=spec.latent_dim)
        zM.append(z)
        fig_img.append((mx.img + mx.img_level["M"]) @ z + s * rng.normal(size=spec.image_dim))
        caption = _tokens((mx.txt + mx.txt_level["M"]) @ z + s * rng.normal(size=spec.text_dim), mx.edges["M"])
        figures.append(FigureRecord(fid, SYNTH_PREFIX + fid, caption, PANEL_PX * n_p, PANEL_PX,
                                    license_tag="synthetic"))
        for j in range(n_p):
            pid = f"{fid}/p{j:02d}"
            zp = z + spec.sigma_panel * rng.normal(size=spec.latent_dim)
            zP.append(zp)
            pan_img.append((mx.img + mx.img_level["P"]) @ zp + s * rng.normal(size=spec.image_dim))
            text = _tokens((mx.txt + mx.txt_level["P"]) @ zp + s * rng.normal(size=spec.text_dim), mx.edges["P"])
            ident = string.ascii_uppercase[j]
            panels.append(PanelRecord(pid, fid, BBox(j * PANEL_PX, 0, (j + 1) * PANEL_PX, PANEL_PX),
                                      identifier=ident, fragments=[text]))
            fmap = np.broadcast_to(mx.map @ zp, (MAP_CELLS, MAP_CELLS, spec.map_channels)).copy()
            n_r = int(rng.integers(spec.regions_per_panel[0], spec.regions_per_panel[1] + 1))
            quads = rng.permutation(len(QUADRANTS))[:n_r]
            for k, q in enumerate(sorted(quads)):
                qx, qy = QUADRANTS[q]
                zr = zp + spec.sigma_region * rng.normal(size=spec.latent_dim)
                zR.append(zr)
                half = MAP_CELLS // 2
                fmap[qy * half:(qy + 1) * half, qx * half:(qx + 1) * half] = mx.map @ zr
                reg_img.append((mx.img + mx.img_level["R"]) @ zr + s * rng.normal(size=spec.image_dim))
                mix = mx.txt + mx.txt_level["R"]
                sub = _tokens(mix @ zr + s * rng.normal(size=spec.text_dim), mx.edges["R"])
                lv = _tokens(mix @ zr + s * rng.normal(size=spec.text_dim), mx.edges["R"])
                side = PANEL_PX / 2
                regions.append(RegionRecord(f"{pid}/r{k:02d}", pid,
                                            BBox(qx * side, qy * side, (qx + 1) * side, (qy + 1) * side),
                                            "caption", grounded_subcaption=sub, lvlm_caption=lv))
            pan_maps.append(fmap + 0.5 * s * rng.normal(size=fmap.shape))

    manifest = CorpusManifest(figures, panels, regions)
    k = spec.latent_dim

    def mat(rows, width):
        return np.array(rows, dtype=np.float64).reshape(len(rows), width)

    arrays = {
        "figure_ids": np.array([f.figure_id for f in figures], dtype=str),
        "panel_ids": np.array([p.panel_id for p in panels], dtype=str),
        "region_ids": np.array([r.region_id for r in regions], dtype=str),
        "figure_image": mat(fig_img, spec.image_dim),
        "panel_image": mat(pan_img, spec.image_dim),
        "region_image": mat(reg_img, spec.image_dim),
        "panel_maps": np.array(pan_maps, dtype=np.float64).reshape(len(pan_maps), MAP_CELLS, MAP_CELLS, spec.map_channels),
        "z_M": mat(zM, k), "z_P": mat(zP, k), "z_R": mat(zR, k),
    }
    return SynthCorpus(manifest, arrays)


def write_corpus(corpus: SynthCorpus, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath, fpath = out / "manifest.jsonl", out / "features.npz"
    write_manifest(corpus.manifest, mpath)
    write_npz(fpath, corpus.arrays)
    return mpath, fpath


def family_similarity(corpus: SynthCorpus) -> tuple[float, float]:
    """Mean cosine of panel codes with their own figure vs with other figures."""
    zM, zP = corpus.latents("M"), corpus.latents("P")
    parent = np.array([int(p.parent_figure[3:]) for p in corpus.manifest.panels])
    un = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
    cos = un(zP) @ un(zM).T
    own = cos[np.arange(len(zP)), parent]
    mask = np.ones_like(cos, dtype=bool)
    mask[np.arange(len(zP)), parent] = False
    return float(own.mean()), float(cos[mask].mean())
