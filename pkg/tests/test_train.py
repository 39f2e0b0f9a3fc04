from __future__ import annotations

import math

import numpy as np
import pytest

from hierfig.align.losses import HierBatch, LevelTable, ObjectiveConfig, clip_loss, level_objective
from hierfig.align.model import EncoderParams, encode
from hierfig.align.optim import OptimConfig
from hierfig.align.train import (LevelMismatchError, NonFiniteLossError, TrainConfig, TrainState,
                                 TrainingError, embed_level, history_csv, level_sequence, parse_cycle,
                                 region_texts, run_schedule, sample_batch, train_step)
from hierfig.features import SynthStore, build_tables
from hierfig.synth import SynthSpec, generate


def fast_optim(lr=1e-2, steps=100) -> OptimConfig:
    return OptimConfig(branch_lr={"shared": lr, "bbox": lr, "fine": lr, "coarse": lr},
                       warmup_steps=0, total_steps=steps)


@pytest.fixture(scope="module")
def tables():
    corpus = generate(SynthSpec(n_figures=12, panels_per_figure=(1, 3), regions_per_panel=(1, 3), seed=4))
    return build_tables(corpus.manifest, store=SynthStore(corpus.arrays))


def test_cycle_sequences():
    assert level_sequence("1:1:1", 9) == list("MPRMPRMPR")
    assert level_sequence("1:2:3", 6) == list("MPPRRR")
    assert level_sequence("0:1:0", 3) == list("PPP")
    assert level_sequence("1:1:1", 4, available={"M", "P"}) == list("MPMP")
    for bad in ["1:1", "0:0:0", "a:b:c", ""]:
        with pytest.raises(ValueError):
            parse_cycle(bad)
    with pytest.raises(TrainingError):
        level_sequence("0:0:1", 3, available={"M"})


def test_batches_are_well_formed(tables):
    rng = np.random.default_rng(0)
    m = sample_batch(tables, "M", 5, rng)
    assert len(m.items) == 5 and m.children is not None and m.children.parent.max() < 5
    p = sample_batch(tables, "P", 6, rng)
    assert len(p.items) == 6 and len(p.children) > 0
    r = sample_batch(tables, "R", 8, rng)
    assert len(r.items) == 8 and set(r.text_source) <= {"sub", "lvlm"}
    assert r.maps.shape[1:] == tables.panel_maps.shape[1:]
    assert r.map_index.max() < len(r.maps)


def test_region_text_source_is_uniform_over_available(tables):
    rng = np.random.default_rng(1)
    rows = np.zeros(4000, dtype=np.int64)
    _, sources = region_texts(tables, rows, rng)
    share = sources.count("sub") / len(sources)
    assert abs(share - 0.5) < 0.03
    has = tables.region_has_lvlm.copy()
    tables.region_has_lvlm[0] = False
    try:
        _, sources = region_texts(tables, rows[:50], rng)
        assert set(sources) == {"sub"}
    finally:
        tables.region_has_lvlm[:] = has


def test_runs_are_bit_identical(tables):
    cfg = TrainConfig(steps=12, batch_size=6, seed=3, optim=fast_optim())
    s1, h1 = run_schedule(tables, cfg)
    s2, h2 = run_schedule(tables, cfg)
    assert history_csv(h1) == history_csv(h2)
    assert all(np.array_equal(s1.params[k], s2.params[k]) for k in s1.params.names())
    assert [r.level for r in h1] == list("MPR") * 4
    for r in h1:
        vals = [v for v in (r.intra_M, r.intra_P, r.intra_R, r.inter_MP, r.inter_PR, r.fine) if v is not None]
        assert all(v >= 0 and math.isfinite(v) for v in vals)


def test_history_csv_columns(tables):
    _, hist = run_schedule(tables, TrainConfig(steps=3, batch_size=4, optim=fast_optim()))
    lines = history_csv(hist).splitlines()
    assert lines[0].startswith("step,level,intra_M")
    assert len(lines) == 4 and lines[1].split(",")[:2] == ["1", "M"]


def test_level_mismatch_rejected(tables):
    state = TrainState.fresh(EncoderParams.init(tables.figure_image.shape[1], tables.figure_text.shape[1],
                                                fine_in=36))
    batch = sample_batch(tables, "P", 4, np.random.default_rng(0))
    with pytest.raises(LevelMismatchError):
        train_step(state, batch, fast_optim(), expected_level="M")


def test_non_finite_step_leaves_state_unchanged(tables):
    p = EncoderParams.init(tables.figure_image.shape[1], tables.figure_text.shape[1], fine_in=36)
    p.arrays["text.W2"][0, 0] = np.nan
    state = TrainState.fresh(p)
    before = p.copy()
    batch = sample_batch(tables, "M", 4, np.random.default_rng(0))
    with pytest.raises(NonFiniteLossError):
        train_step(state, batch, fast_optim())
    assert state.step == 0
    assert all(np.array_equal(state.params[k], before[k], equal_nan=True) for k in p.names())


def test_single_m_step_reduces_intra_loss(tables):
    cfg = TrainConfig()
    p = EncoderParams.init(tables.figure_image.shape[1], tables.figure_text.shape[1], fine_in=36, seed=0)
    batch = sample_batch(tables, "M", 4, np.random.default_rng(5))
    assert len(batch.items) == 4
    state = TrainState.fresh(p)
    before = level_objective(state.params, batch, cfg.objective).parts["intra_M"]
    state, report = train_step(state, batch, fast_optim(1e-3), cfg.objective, expected_level="M")
    after = level_objective(state.params, batch, cfg.objective).parts["intra_M"]
    assert report.intra_M == pytest.approx(before)
    assert after < before


def test_fine_term_a_decreases_over_50_steps():
    rng = np.random.default_rng(2)
    width, n = 12, 8
    crops = rng.normal(size=(n, width))
    # each region's text features equal its crop signature
    batch = HierBatch("R", LevelTable(crops, crops.copy()), maps=rng.normal(size=(n, 4, 4, 4)),
                      boxes=np.tile([0.1, 0.1, 0.6, 0.6], (n, 1)), map_index=np.arange(n),
                      text_source=["sub"] * n)
    state = TrainState.fresh(EncoderParams.init(width, width, d=8, hidden=16, fine_in=36, seed=1))
    objective = ObjectiveConfig()
    curve = []
    for _ in range(50):
        v = encode(state.params, crops, "image", "R")
        t = encode(state.params, crops, "text")
        curve.append(clip_loss(v, t, state.params.logit_scale)[0])
        state, _ = train_step(state, batch, fast_optim(1e-3), objective, expected_level="R")
    assert all(b < a for a, b in zip(curve, curve[1:]))
    assert curve[-1] < 0.5 * curve[0]


def test_embed_level_shapes(tables):
    p = EncoderParams.init(tables.figure_image.shape[1], tables.figure_text.shape[1], fine_in=36)
    for lvl in "MPR":
        img, txt = embed_level(p, tables, lvl)
        assert img.shape == txt.shape == (tables.count(lvl), p.d)
    with pytest.raises(ValueError):
        embed_level(p, tables, "X")


def test_empty_corpus_rejected(tables):
    from dataclasses import replace
    empty = replace(tables, figure_ids=[], panel_ids=[], region_ids=[])
    with pytest.raises(TrainingError):
        run_schedule(empty, TrainConfig(steps=1))
