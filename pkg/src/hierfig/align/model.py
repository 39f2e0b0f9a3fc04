"""Toy dual encoder with hand-written backward passes.

Each tower is affine -> tanh -> affine -> L2 normalize. Image embeddings at
the figure and panel levels pass through a residual level head
``u = z + z @ H`` (initialized to zero, so it starts as the identity);
region embeddings use no head. A linear projection maps ROI-pooled panel
features into the embedding space for the fine-grained term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .._io import write_npz

CHECKPOINT_VERSION = 1
LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MIN = math.log(1 / 100)
LOGIT_SCALE_MAX = math.log(100)
DEGENERATE_NORM = 1e-12

LEVEL_HEADS = {"M": "head.M", "P": "head.P"}

# parameter name prefix -> optimizer branch
BRANCHES = {
    "image.": "shared",
    "text.": "shared",
    "logit_scale": "shared",
    "fine.": "bbox",
    "head.P": "fine",
    "head.M": "coarse",
}


def branch_of(name: str) -> str:
    for prefix, branch in BRANCHES.items():
        if name.startswith(prefix):
            return branch
    raise KeyError(name)


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]

    @classmethod
    def init(cls, d_in_image: int, d_in_text: int, d: int = 16, hidden: int = 64,
             fine_in: int = 36, seed: int = 0, init_scale: float = 1.0) -> EncoderParams:
        if d < 2:
            raise ValueError("embedding width d must be >= 2")
        rng = np.random.default_rng(seed)
        a: dict[str, np.ndarray] = {}
        for tower, d_in in (("image", d_in_image), ("text", d_in_text)):
            a[f"{tower}.W1"] = rng.normal(0, init_scale / math.sqrt(d_in), (d_in, hidden))
            a[f"{tower}.b1"] = np.zeros(hidden)
            a[f"{tower}.W2"] = rng.normal(0, init_scale / math.sqrt(hidden), (hidden, d))
            # nonzero output bias keeps a zero input off the degenerate path
            a[f"{tower}.b2"] = rng.normal(0, 0.01, d)
        a["fine.W"] = rng.normal(0, 1 / math.sqrt(fine_in), (fine_in, d))
        a["head.M"] = np.zeros((d, d))
        a["head.P"] = np.zeros((d, d))
        a["logit_scale"] = np.array(LOGIT_SCALE_INIT)
        return cls(a)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def d(self) -> int:
        return self.arrays["image.W2"].shape[1]

    @property
    def logit_scale(self) -> float:
        return float(self.arrays["logit_scale"])

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def copy(self) -> EncoderParams:
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def clamp_logit_scale(self) -> None:
        self.arrays["logit_scale"] = np.array(
            min(max(float(self.arrays["logit_scale"]), LOGIT_SCALE_MIN), LOGIT_SCALE_MAX))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise L2 normalization; zero rows map to the first basis vector.

    Returns ``(e, norms, degenerate_mask)``.
    """
    n = np.sqrt(np.einsum("ij,ij->i", u, u))
    deg = n < DEGENERATE_NORM
    e = np.zeros_like(u)
    ok = ~deg
    e[ok] = u[ok] / n[ok, None]
    e[deg, 0] = 1.0
    return e, n, deg


def normalize_rows_backward(de: np.ndarray, e: np.ndarray, n: np.ndarray,
                            deg: np.ndarray) -> np.ndarray:
    du = np.zeros_like(de)
    ok = ~deg
    if ok.any():
        eo, do = e[ok], de[ok]
        du[ok] = (do - eo * np.einsum("ij,ij->i", eo, do)[:, None]) / n[ok, None]
    return du


@dataclass
class EncodeCache:
    tower: str
    head: Optional[str]
    x: np.ndarray
    h: np.ndarray
    z: np.ndarray
    e: np.ndarray
    n: np.ndarray
    deg: np.ndarray


def encode_forward(params: EncoderParams, x: np.ndarray, tower: str,
                   level: Optional[str] = None) -> tuple[np.ndarray, EncodeCache]:
    if tower not in ("image", "text"):
        raise ValueError(f"unknown tower {tower!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params[f"{tower}.W1"].shape[0]:
        raise ValueError(f"{tower} tower expects width {params[f'{tower}.W1'].shape[0]}, "
                         f"got shape {x.shape}")
    h = np.tanh(x @ params[f"{tower}.W1"] + params[f"{tower}.b1"])
    z = h @ params[f"{tower}.W2"] + params[f"{tower}.b2"]
    head = LEVEL_HEADS.get(level) if tower == "image" else None
    u = z + z @ params[head] if head else z
    e, n, deg = normalize_rows(u)
    return e, EncodeCache(tower, head, x, h, z, e, n, deg)


def encode(params: EncoderParams, x: np.ndarray, tower: str, level: Optional[str] = None) -> np.ndarray:
    return encode_forward(params, x, tower, level)[0]


def encode_backward(params: EncoderParams, cache: EncodeCache, de: np.ndarray,
                    grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients of a scalar whose gradient w.r.t. the embeddings is ``de``."""
    t = cache.tower
    du = normalize_rows_backward(de, cache.e, cache.n, cache.deg)
    if cache.head:
        grads[cache.head] += cache.z.T @ du
        dz = du + du @ params[cache.head].T
    else:
        dz = du
    grads[f"{t}.W2"] += cache.h.T @ dz
    grads[f"{t}.b2"] += dz.sum(axis=0)
    da = (dz @ params[f"{t}.W2"].T) * (1.0 - cache.h * cache.h)
    grads[f"{t}.W1"] += cache.x.T @ da
    grads[f"{t}.b1"] += da.sum(axis=0)


def save_checkpoint(path, params: EncoderParams, m: dict, v: dict, step: int) -> None:
    """Versioned npz written with fixed zip timestamps so identical runs give identical bytes."""
    entries = {"meta/version": np.array(CHECKPOINT_VERSION), "meta/step": np.array(step)}
    for k in params.names():
        entries[f"param/{k}"] = params[k]
        entries[f"m/{k}"] = m[k]
        entries[f"v/{k}"] = v[k]
    write_npz(path, entries)


def load_checkpoint(path) -> tuple[EncoderParams, dict, dict, int]:
    with np.load(path) as z:
        version = int(z["meta/version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
        m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
        v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}
        step = int(z["meta/step"])
    return EncoderParams(params), m, v, step

