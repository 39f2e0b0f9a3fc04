"""Contrastive objectives with exact analytic gradients.

Every function that returns gradients returns them for the *loss value it
reports*; the finite-difference tests treat these as the ground truth
contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import kernels
from .model import (EncoderParams, encode_backward, encode_forward, normalize_rows,
                    normalize_rows_backward)

AGGREGATE_DEGENERATE = 1e-9


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def clip_loss(A: np.ndarray, B: np.ndarray, s: float) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Symmetric InfoNCE over ``exp(s) * A @ B.T`` with matches on the diagonal.

    Returns ``(loss, dA, dB, ds)``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    if n == 0:
        raise ValueError("clip_loss needs at least one pair")
    if B.shape != A.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    scale = math.exp(float(s))
    logits = scale * (A @ B.T)
    lr = _log_softmax(logits, axis=1)
    lc = _log_softmax(logits, axis=0)
    idx = np.arange(n)
    loss = -0.5 * (lr[idx, idx].mean() + lc[idx, idx].mean())
    eye = np.eye(n)
    dlogits = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / n
    dA = scale * (dlogits @ B)
    dB = scale * (dlogits.T @ A)
    ds = float(np.sum(dlogits * logits))
    return max(float(loss), 0.0), dA, dB, ds


@dataclass
class AggregateCache:
    groups: np.ndarray
    counts: np.ndarray
    out: np.ndarray
    norms: np.ndarray
    degenerate: np.ndarray
    first: np.ndarray
    renormalize: bool


def aggregate_forward(children: np.ndarray, groups: Sequence[int], n_groups: Optional[int] = None,
                      renormalize: bool = True) -> tuple[np.ndarray, AggregateCache]:
    """Mean of each group's rows, then L2 renormalization.

    A group whose mean vanishes returns its first child and is flagged.
    """
    children = np.asarray(children, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape[0] != children.shape[0]:
        raise ValueError("one group index per child row")
    n_groups = int(groups.max()) + 1 if n_groups is None else n_groups
    if groups.size and (groups.min() < 0 or groups.max() >= n_groups):
        raise ValueError("group index out of range")
    counts = np.bincount(groups, minlength=n_groups)
    if np.any(counts == 0):
        raise ValueError(f"empty group(s): {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((n_groups, children.shape[1]))
    np.add.at(sums, groups, children)
    mean = sums / counts[:, None]
    first = np.array([np.flatnonzero(groups == g)[0] for g in range(n_groups)])
    norms = np.sqrt(np.einsum("ij,ij->i", mean, mean))
    deg = norms < AGGREGATE_DEGENERATE
    if renormalize:
        out = np.where(deg[:, None], children[first], mean / np.where(deg, 1.0, norms)[:, None])
    else:
        out = mean
        deg = np.zeros(n_groups, dtype=bool)
    return out, AggregateCache(groups, counts, out, norms, deg, first, renormalize)


def aggregate(children, groups, n_groups=None, renormalize=True) -> tuple[np.ndarray, np.ndarray]:
    out, cache = aggregate_forward(children, groups, n_groups, renormalize)
    return out, cache.degenerate


def aggregate_backward(dout: np.ndarray, cache: AggregateCache) -> np.ndarray:
    if cache.renormalize:
        ok = ~cache.degenerate
        dmean = np.zeros_like(dout)
        e, do = cache.out[ok], dout[ok]
        dmean[ok] = (do - e * np.einsum("ij,ij->i", e, do)[:, None]) / cache.norms[ok, None]
    else:
        dmean = dout
    dchildren = dmean[cache.groups] / cache.counts[cache.groups, None]
    for g in np.flatnonzero(cache.degenerate):
        dchildren[cache.first[g]] += dout[g]
    return dchildren


def roi_pool(fmap: np.ndarray, box, grid: int) -> np.ndarray:
    """Bilinear ROI pooling of an ``H x W x c`` map over a normalized box; ``grid*grid*c`` values."""
    if hasattr(box, "as_tuple"):
        if box.unit != "norm":
            raise ValueError("roi_pool expects a normalized box")
        box = box.as_tuple()
    return kernels.roi_pool(np.ascontiguousarray(fmap, dtype=np.float64),
                            np.asarray(box, dtype=np.float64), int(grid))


# ---------------------------------------------------------------- batches

@dataclass
class LevelTable:
    """Paired rows of one level; ``parent`` indexes the coarser table of the same batch."""
    image: np.ndarray
    text: np.ndarray
    parent: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.image) != len(self.text):
            raise ValueError("image and text rows must pair up")

    def __len__(self) -> int:
        return len(self.image)


@dataclass
class HierBatch:
    level: str
    items: LevelTable
    children: Optional[LevelTable] = None  # for the inter-level term
    maps: Optional[np.ndarray] = None  # R level: panel feature maps (n_maps, H, W, c)
    boxes: Optional[np.ndarray] = None  # R level: region boxes, panel-normalized
    map_index: Optional[np.ndarray] = None  # R level: region -> map row
    text_source: Optional[list[str]] = None  # R level: "sub" or "lvlm" per region

    def __post_init__(self):
        if self.level not in ("M", "P", "R"):
            raise ValueError(f"unknown level {self.level!r}")
        if self.children is not None:
            p = self.children.parent
            if p is None or len(p) != len(self.children):
                raise ValueError("child rows need parent indices")
            if len(p) and (p.min() < 0 or p.max() >= len(self.items)):
                raise ValueError("dangling parent index in batch")
        if self.map_index is not None:
            if self.maps is None or self.boxes is None or len(self.map_index) != len(self.items):
                raise ValueError("fine-grained inputs must cover every region")
            if len(self.map_index) and (self.map_index.min() < 0 or self.map_index.max() >= len(self.maps)):
                raise ValueError("dangling region map index")


CHILD_LEVEL = {"M": "P", "P": "R"}


@dataclass
class ObjectiveConfig:
    intra_weight: float = 1.0
    inter_weight: float = 1.0
    fine_weight: float = 1.0
    renormalize_aggregates: bool = True
    roi_grid: int = 3


@dataclass
class Objective:
    total: float
    parts: dict[str, float]
    grads: dict[str, np.ndarray]
    excluded_coarse: int = 0
    degenerate_aggregates: int = 0
    info: dict = field(default_factory=dict)


def _inter_term(params, grads, v, dv, t, dt, children: LevelTable, child_level: str,
                cfg: ObjectiveConfig, weight: float) -> tuple[float, float, int, int]:
    """Coarse embeddings vs aggregated child embeddings, visual plus textual CLIP terms.

    Adds into ``dv``/``dt``/``grads``; returns (loss, ds, excluded, degenerate).
    """
    parent = np.asarray(children.parent, dtype=np.int64)
    present = np.unique(parent)
    excluded = len(v) - len(present)
    if len(present) == 0:
        return 0.0, 0.0, excluded, 0
    remap = np.full(len(v), -1, dtype=np.int64)
    remap[present] = np.arange(len(present))
    groups = remap[parent]
    s = float(params["logit_scale"])

    vf, cvf = encode_forward(params, children.image, "image", child_level)
    tf, ctf = encode_forward(params, children.text, "text")
    vbar, ca_v = aggregate_forward(vf, groups, len(present), cfg.renormalize_aggregates)
    tbar, ca_t = aggregate_forward(tf, groups, len(present), cfg.renormalize_aggregates)

    lv, dA, dB, dsv = clip_loss(v[present], vbar, s)
    dv[present] += weight * dA
    encode_backward(params, cvf, aggregate_backward(weight * dB, ca_v), grads)
    lt, dA, dB, dst = clip_loss(t[present], tbar, s)
    dt[present] += weight * dA
    encode_backward(params, ctf, aggregate_backward(weight * dB, ca_t), grads)
    degenerate = int(ca_v.degenerate.sum() + ca_t.degenerate.sum())
    return lv + lt, weight * (dsv + dst), excluded, degenerate


def _fine_term(params, grads, v, dv, t, dt, batch: HierBatch, cfg: ObjectiveConfig,
               weight: float) -> tuple[float, float]:
    """Crop embedding vs text, plus projected ROI features vs crop embedding."""
    s = float(params["logit_scale"])
    la, dA, dB, dsa = clip_loss(v, t, s)
    dv += weight * dA
    dt += weight * dB

    pooled = np.stack([roi_pool(batch.maps[j], batch.boxes[k], cfg.roi_grid)
                       for k, j in enumerate(batch.map_index)])
    raw = pooled @ params["fine.W"]
    p, n, deg = normalize_rows(raw)
    lb, dP, dV, dsb = clip_loss(p, v, s)
    dv += weight * dV
    grads["fine.W"] += pooled.T @ normalize_rows_backward(weight * dP, p, n, deg)
    return la + lb, weight * (dsa + dsb)


def level_objective(params: EncoderParams, batch: HierBatch, cfg: ObjectiveConfig = ObjectiveConfig(),
                    terms: Optional[Sequence[str]] = None) -> Objective:
    """Loss and gradients for one training step at ``batch.level``.

    M and P steps combine the intra-level term with the inter-level term
    against their children; R steps combine the intra-level term with the
    fine-grained term. ``terms`` restricts the sum (used by the gradient tests).
    """
    level = batch.level
    active = set(terms) if terms is not None else {"intra", "inter" if level != "R" else "fine"}
    grads = params.zeros_like()
    s = float(params["logit_scale"])

    v, cv = encode_forward(params, batch.items.image, "image", level)
    t, ct = encode_forward(params, batch.items.text, "text")
    dv = np.zeros_like(v)
    dt = np.zeros_like(t)
    ds = 0.0
    parts: dict[str, float] = {}
    excluded = degenerate = 0

    if "intra" in active:
        w = cfg.intra_weight
        l, dA, dB, d = clip_loss(v, t, s)
        parts[f"intra_{level}"] = l
        dv += w * dA
        dt += w * dB
        ds += w * d
    if "inter" in active and level in CHILD_LEVEL:
        key = f"inter_{level}{CHILD_LEVEL[level]}"
        if batch.children is not None and len(batch.children):
            l, d, excluded, degenerate = _inter_term(params, grads, v, dv, t, dt, batch.children,
                                                     CHILD_LEVEL[level], cfg, cfg.inter_weight)
            parts[key] = l
            ds += d
        else:
            excluded = len(v)
            parts[key] = 0.0
    if "fine" in active and level == "R":
        if batch.map_index is None:
            raise ValueError("fine-grained term needs panel maps and region boxes")
        l, d = _fine_term(params, grads, v, dv, t, dt, batch, cfg, cfg.fine_weight)
        parts["fine"] = l
        ds += d

    encode_backward(params, cv, dv, grads)
    encode_backward(params, ct, dt, grads)
    grads["logit_scale"] += ds

    weights = {"intra": cfg.intra_weight, "inter": cfg.inter_weight, "fine": cfg.fine_weight}
    total = sum(weights[k.split("_")[0]] * val for k, val in parts.items())
    return Objective(total, parts, grads, excluded, degenerate)


def inter_level_loss(params: EncoderParams, batch: HierBatch,
                     cfg: ObjectiveConfig = ObjectiveConfig()) -> tuple[float, dict[str, np.ndarray]]:
    obj = level_objective(params, batch, cfg, terms=("inter",))
    return obj.total, obj.grads


def fine_grained_loss(params: EncoderParams, batch: HierBatch,
                      cfg: ObjectiveConfig = ObjectiveConfig()) -> tuple[float, dict[str, np.ndarray]]:
    obj = level_objective(params, batch, cfg, terms=("fine",))
    return obj.total, obj.grads
