"""Hashed character-trigram vectors.

One vectorizer serves two callers: text similarity during box cleanup
(sparse, 2**20 buckets so collisions are negligible) and dense text
features for the toy text tower (small width, collisions tolerated).
"""

from __future__ import annotations

import math
import re
import zlib
from collections import Counter

import numpy as np

SIMILARITY_DIM = 1 << 20


def normalize_text(text: str) -> str:
    return " " + re.sub(r"\s+", " ", text.strip().lower()) + " "


def trigrams(text: str) -> list[str]:
    s = normalize_text(text)
    if s.strip() == "":
        return []
    if len(s) < 3:
        return [s]
    return [s[i:i + 3] for i in range(len(s) - 2)]


def _bucket(gram: str, dim: int) -> int:
    return zlib.crc32(gram.encode("utf-8")) % dim


def trigram_counts(text: str, dim: int = SIMILARITY_DIM) -> Counter:
    return Counter(_bucket(g, dim) for g in trigrams(text))


def trigram_vector(text: str, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    for k, c in trigram_counts(text, dim).items():
        v[k] = c
    return v


def text_similarity(a: str, b: str) -> float:
    """Cosine between L2-normalized hashed trigram count vectors, in [0, 1]."""
    if a == b:
        return 1.0
    ca, cb = trigram_counts(a), trigram_counts(b)
    if not ca or not cb:
        return 0.0
    dot = sum(v * cb.get(k, 0) for k, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return min(1.0, dot / (na * nb))
