from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import EncoderParams, branch_of

DEFAULT_BRANCH_LR = {"shared": 1e-5, "bbox": 5e-6, "fine": 1e-5, "coarse": 1e-5}


@dataclass
class OptimConfig:
    branch_lr: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BRANCH_LR))
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 1000
    total_steps: int = 10000
    lr_floor: float = 0.0  # fraction of the base rate reached at the final step

    def __post_init__(self):
        missing = set(DEFAULT_BRANCH_LR) - set(self.branch_lr)
        if missing:
            raise ValueError(f"branch_lr missing {sorted(missing)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ValueError("warmup_steps >= 0 and total_steps >= 1 required")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("lr_floor must lie in [0, 1]")


def lr_multiplier(step: int, warmup: int, total: int, floor: float = 0.0) -> float:
    """Linear warmup from 0, then cosine decay to ``floor`` at ``total``."""
    if warmup > 0 and step < warmup:
        return step / warmup
    if total <= warmup:
        return 1.0
    progress = min(1.0, (step - warmup) / (total - warmup))
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: EncoderParams) -> AdamWState:
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> AdamWState:
        return AdamWState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step)


def adamw_update(params: EncoderParams, grads: dict[str, np.ndarray], state: AdamWState,
                 cfg: OptimConfig) -> tuple[EncoderParams, AdamWState, dict[str, float]]:
    """One decoupled-weight-decay Adam update; inputs are not modified.

    Update number ``t = state.step + 1`` uses the scheduled rate at ``t``.
    """
    t = state.step + 1
    mult = lr_multiplier(t, cfg.warmup_steps, cfg.total_steps, cfg.lr_floor)
    b1, b2 = cfg.beta1, cfg.beta2
    new_p = {}
    new_state = AdamWState({}, {}, t)
    lrs = {}
    for name in params.names():
        lr = cfg.branch_lr[branch_of(name)] * mult
        lrs[branch_of(name)] = lr
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[name] = params[name] * (1.0 - lr * cfg.weight_decay) - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        new_state.m[name] = m
        new_state.v[name] = v
    out = EncoderParams(new_p)
    out.clamp_logit_scale()
    return out, new_state, lrs
