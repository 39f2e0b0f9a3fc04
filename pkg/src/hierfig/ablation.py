"""Level ablations on synthetic corpora.

Train one model per cycle spec on the same seeded corpus and split, then
score retrieval at every level on the held-out figures. Used to compare
single-level schedules against the alternating one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .align.optim import OptimConfig
from .align.train import TrainConfig, embed_level, run_schedule
from .features import SynthStore, build_tables
from .retrieval import DEFAULT_KS, bidirectional, build_eval_split
from .synth import SynthSpec, generate


@dataclass
class AblationSetup:
    spec: SynthSpec = field(default_factory=SynthSpec)
    steps: int = 600
    batch_size: int = 32
    base_lr: float = 3e-3  # shared/fine/coarse; the box head gets half
    warmup_steps: int = 20
    holdout_fraction: float = 0.25
    seed: int = 0

    def optim(self) -> OptimConfig:
        lr = self.base_lr
        return OptimConfig(branch_lr={"shared": lr, "bbox": lr / 2, "fine": lr, "coarse": lr},
                           warmup_steps=self.warmup_steps, total_steps=self.steps)


def level_ablation(setup: AblationSetup, cycles: Sequence[str], ks: Sequence[int] = DEFAULT_KS
                   ) -> dict[str, dict[str, dict[str, dict[int, float]]]]:
    """``result[cycle][level][direction][k]`` = recall percentage on the held-out split."""
    corpus = generate(setup.spec)
    store = SynthStore(corpus.arrays)
    train, held = build_eval_split(corpus.manifest, setup.holdout_fraction, setup.seed)
    tables = build_tables(train, store=store)
    evals = build_tables(held, store=store)
    out = {}
    for cycle in cycles:
        cfg = TrainConfig(steps=setup.steps, cycle=cycle, batch_size=setup.batch_size,
                          seed=setup.seed, optim=setup.optim())
        state, _ = run_schedule(tables, cfg)
        per_level = {}
        for level in ("M", "P", "R"):
            img, txt = embed_level(state.params, evals, level)
            per_level[level] = {r.direction: dict(r.r_at) for r in bidirectional(img, txt, ks, level)}
        out[cycle] = per_level
    return out
