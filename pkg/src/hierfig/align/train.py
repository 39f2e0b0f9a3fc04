"""Alternating M/P/R training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..features import TrainingTables
from .losses import HierBatch, LevelTable, Objective, ObjectiveConfig, level_objective
from .model import EncoderParams, encode, load_checkpoint, save_checkpoint
from .optim import AdamWState, OptimConfig, adamw_update

log = logging.getLogger(__name__)

LEVELS = ("M", "P", "R")
REPORT_FIELDS = ("step", "level", "intra_M", "intra_P", "intra_R", "inter_MP", "inter_PR",
                 "fine", "total", "grad_max_norm", "excluded_coarse", "degenerate_aggregates", "lr")


class TrainingError(Exception):
    pass


class LevelMismatchError(TrainingError):
    pass


class NonFiniteLossError(TrainingError):
    pass


@dataclass
class TrainState:
    params: EncoderParams
    opt: AdamWState

    @classmethod
    def fresh(cls, params: EncoderParams) -> TrainState:
        return cls(params, AdamWState.zeros(params))

    @property
    def step(self) -> int:
        return self.opt.step

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.opt.m, self.opt.v, self.opt.step)

    @classmethod
    def load(cls, path) -> TrainState:
        params, m, v, step = load_checkpoint(path)
        return cls(params, AdamWState(m, v, step))


@dataclass
class LossReport:
    step: int
    level: str
    total: float
    intra_M: Optional[float] = None
    intra_P: Optional[float] = None
    intra_R: Optional[float] = None
    inter_MP: Optional[float] = None
    inter_PR: Optional[float] = None
    fine: Optional[float] = None
    grad_max_norm: float = 0.0
    excluded_coarse: int = 0
    degenerate_aggregates: int = 0
    lr: float = 0.0

    def as_row(self) -> list[str]:
        out = []
        for name in REPORT_FIELDS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out


def history_csv(history: list[LossReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in history:
        w.writerow(r.as_row())
    return buf.getvalue()


def train_step(state: TrainState, batch: HierBatch, optim: OptimConfig,
               objective: ObjectiveConfig = ObjectiveConfig(),
               expected_level: Optional[str] = None) -> tuple[TrainState, LossReport]:
    """One update at the batch's level; ``state`` is never modified."""
    if expected_level is not None and batch.level != expected_level:
        raise LevelMismatchError(f"scheduler expects {expected_level}, batch is {batch.level}")
    obj: Objective = level_objective(state.params, batch, objective)
    finite = math.isfinite(obj.total) and all(np.all(np.isfinite(g)) for g in obj.grads.values())
    if not finite:
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1} ({batch.level})")
    params, opt, lrs = adamw_update(state.params, obj.grads, state.opt, optim)
    report = LossReport(
        step=opt.step, level=batch.level, total=obj.total,
        grad_max_norm=float(max(np.max(np.abs(g)) for g in obj.grads.values())),
        excluded_coarse=obj.excluded_coarse, degenerate_aggregates=obj.degenerate_aggregates,
        lr=lrs["shared"], **obj.parts)
    return TrainState(params, opt), report


def parse_cycle(spec: str) -> list[str]:
    """``"1:2:3"`` -> M, P, P, R, R, R. Zero counts drop a level."""
    if not re.fullmatch(r"\s*\d+\s*:\s*\d+\s*:\s*\d+\s*", spec or ""):
        raise ValueError(f"cycle spec must look like 'a:b:c', got {spec!r}")
    counts = [int(x) for x in spec.split(":")]
    seq = [lvl for lvl, c in zip(LEVELS, counts) for _ in range(c)]
    if not seq:
        raise ValueError("cycle spec activates no level")
    return seq


def level_sequence(cycle: str, n_steps: int, available: Optional[set[str]] = None) -> list[str]:
    seq = parse_cycle(cycle)
    if available is not None:
        skipped = sorted(set(seq) - available)
        if skipped:
            log.warning("levels %s have no items and are skipped", ",".join(skipped))
        seq = [s for s in seq if s in available]
        if not seq:
            raise TrainingError("no level of the cycle has training items")
    return [seq[i % len(seq)] for i in range(n_steps)]


def _choose(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def region_texts(tables: TrainingTables, rows: np.ndarray, rng: np.random.Generator
                 ) -> tuple[np.ndarray, list[str]]:
    """Pick one text per region uniformly among the sources it has."""
    text = np.empty((len(rows), tables.region_text_sub.shape[1]))
    sources = []
    for k, r in enumerate(rows):
        avail = [s for s, ok in (("sub", tables.region_has_sub[r]), ("lvlm", tables.region_has_lvlm[r])) if ok]
        if not avail:
            raise TrainingError(f"region {tables.region_ids[r]} has no text")
        src = avail[int(rng.integers(len(avail)))] if len(avail) > 1 else avail[0]
        sources.append(src)
        text[k] = tables.region_text_sub[r] if src == "sub" else tables.region_text_lvlm[r]
    return text, sources


def sample_batch(tables: TrainingTables, level: str, batch_size: int,
                 rng: np.random.Generator) -> HierBatch:
    if level == "M":
        rows = _choose(rng, len(tables.figure_ids), batch_size)
        kids = tables.children_of_figures(rows)
        remap = {int(r): i for i, r in enumerate(rows)}
        children = LevelTable(tables.panel_image[kids], tables.panel_text[kids],
                              np.array([remap[int(tables.panel_parent[k])] for k in kids], dtype=np.int64))
        return HierBatch("M", LevelTable(tables.figure_image[rows], tables.figure_text[rows]), children)
    if level == "P":
        rows = _choose(rng, len(tables.panel_ids), batch_size)
        kids = tables.children_of_panels(rows)
        remap = {int(r): i for i, r in enumerate(rows)}
        kid_text, _ = region_texts(tables, kids, rng)
        children = LevelTable(tables.region_image[kids], kid_text,
                              np.array([remap[int(tables.region_parent[k])] for k in kids], dtype=np.int64))
        return HierBatch("P", LevelTable(tables.panel_image[rows], tables.panel_text[rows]), children)
    if level == "R":
        rows = _choose(rng, len(tables.region_ids), batch_size)
        text, sources = region_texts(tables, rows, rng)
        panels = np.unique(tables.region_parent[rows])
        remap = {int(p): i for i, p in enumerate(panels)}
        return HierBatch("R", LevelTable(tables.region_image[rows], text),
                         maps=tables.panel_maps[panels], boxes=tables.region_boxes[rows],
                         map_index=np.array([remap[int(tables.region_parent[r])] for r in rows], dtype=np.int64),
                         text_source=sources)
    raise ValueError(f"unknown level {level!r}")


@dataclass
class TrainConfig:
    steps: int = 300
    cycle: str = "1:1:1"
    batch_size: int = 32
    seed: int = 0
    d: int = 16
    hidden: int = 64
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)


def init_params(tables: TrainingTables, cfg: TrainConfig) -> EncoderParams:
    c = tables.panel_maps.shape[-1] if tables.panel_maps.ndim == 4 else 3
    g = cfg.objective.roi_grid
    return EncoderParams.init(tables.figure_image.shape[1], tables.figure_text.shape[1],
                              d=cfg.d, hidden=cfg.hidden, fine_in=g * g * c, seed=cfg.seed)


def run_schedule(tables: TrainingTables, cfg: TrainConfig,
                 state: Optional[TrainState] = None) -> tuple[TrainState, list[LossReport]]:
    available = {lvl for lvl in LEVELS if tables.count(lvl) > 0}
    if not available:
        raise TrainingError("empty corpus")
    state = state or TrainState.fresh(init_params(tables, cfg))
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for level in level_sequence(cfg.cycle, cfg.steps, available):
        batch = sample_batch(tables, level, cfg.batch_size, rng)
        state, report = train_step(state, batch, cfg.optim, cfg.objective, expected_level=level)
        history.append(report)
    return state, history


def embed_level(params: EncoderParams, tables: TrainingTables, level: str,
                rows: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Image and evaluation-text embeddings for ``level``.

    Panels use their fragments-only text; regions use the grounded subcaption
    when present, else the model caption.
    """
    if level == "M":
        img, txt = tables.figure_image, tables.figure_text
    elif level == "P":
        img, txt = tables.panel_image, tables.panel_text_short
    elif level == "R":
        img = tables.region_image
        txt = np.where(tables.region_has_sub[:, None], tables.region_text_sub, tables.region_text_lvlm)
    else:
        raise ValueError(level)
    if rows is not None:
        img, txt = img[rows], txt[rows]
    return encode(params, img, "image", level), encode(params, txt, "text")
