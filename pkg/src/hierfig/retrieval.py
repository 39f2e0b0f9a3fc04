"""Cross-modal recall@k and the figure-level evaluation split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .corpus import CorpusManifest

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalResult:
    direction: str  # "I2T" or "T2I"
    level: str  # "panel" or "region" (or "figure")
    r_at: dict[int, float]  # k -> percentage
    n: int  # gallery size
    clamped: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"direction": self.direction, "level": self.level, "N": self.n,
                "r_at": {str(k): round(v, 2) for k, v in sorted(self.r_at.items())},
                "clamped_ks": list(self.clamped)}


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def gt_ranks(queries: np.ndarray, gallery: np.ndarray, gt: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's ground truth under cosine similarity (ties: lower index first)."""
    sim = _unit_rows(np.asarray(queries, dtype=np.float64)) @ _unit_rows(np.asarray(gallery, dtype=np.float64)).T
    return kernels.gt_ranks(np.ascontiguousarray(sim), np.asarray(gt, dtype=np.int64))


def recall_at_k(queries, gallery, gt, ks: Sequence[int] = DEFAULT_KS,
                direction: str = "I2T", level: str = "panel") -> RetrievalResult:
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    n = len(gallery)
    if n < 1 or len(queries) < 1:
        raise ValueError("need at least one query and one gallery item")
    if gt.shape != (len(queries),) or gt.min() < 0 or gt.max() >= n:
        raise ValueError("every query needs exactly one ground-truth gallery index")
    ranks = gt_ranks(queries, gallery, gt)
    out, clamped = {}, []
    for k in ks:
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > n:
            log.warning("k=%d exceeds gallery size %d; clamped", k, n)
            clamped.append(k)
        out[int(k)] = 100.0 * float(np.mean(ranks < min(k, n)))
    return RetrievalResult(direction, level, out, n, clamped)


def bidirectional(image_emb, text_emb, ks=DEFAULT_KS, level="panel") -> list[RetrievalResult]:
    """Paired rows: image i matches text i."""
    gt = np.arange(len(image_emb))
    return [recall_at_k(image_emb, text_emb, gt, ks, "I2T", level),
            recall_at_k(text_emb, image_emb, gt, ks, "T2I", level)]


def format_table(results: Sequence[RetrievalResult]) -> str:
    ks = sorted({k for r in results for k in r.r_at})
    head = ["level", "dir", "N"] + [f"R@{k}" for k in ks]
    rows = [[r.level, r.direction, str(r.n)] + [f"{r.r_at[k]:.2f}" if k in r.r_at else "-" for k in ks]
            for r in results]
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def build_eval_split(manifest: CorpusManifest, holdout_fraction: float,
                     seed: int) -> tuple[CorpusManifest, CorpusManifest]:
    """(train, eval) manifests split at figure level."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    ids = sorted(f.figure_id for f in manifest.figures)
    n_eval = int(round(holdout_fraction * len(ids)))
    if n_eval == 0 or n_eval == len(ids):
        raise ValueError(f"fraction {holdout_fraction} leaves an empty side for {len(ids)} figures")
    rng = np.random.default_rng(seed)
    held = set(ids[i] for i in rng.permutation(len(ids))[:n_eval])
    train = manifest.subset([i for i in ids if i not in held])
    evals = manifest.subset([i for i in ids if i in held])
    return train, evals
