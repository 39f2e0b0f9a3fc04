from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np

from hierfig.corpus import BBox
from hierfig.lvlm import LvlmClient

ROOT = Path(__file__).resolve().parents[1]
FIXTURE_DIR = ROOT / "fixtures" / "figset20"
FIXTURE_CONFIG = ROOT / "configs" / "fixture.yaml"
SYNTH_SPEC = ROOT / "configs" / "synth_spec.yaml"

# level counts of the bundled fixture run, pinned from the deterministic mock pipeline
PINNED_COUNTS = {"M": 20, "P": 59, "R": 72}
PINNED_CLEANUP = {"input": 100, "output": 72, "removed": {"clip": 0, "degenerate": 14, "nms": 0, "merge": 14}}

# log(e^10 + 2) - 10 at 50 digits, from tests/oracles/clip_closed_form.py
CLIP_N3_SCALE10 = 9.0795737467244446e-05


class ScriptedTransport:
    """Answers each request with ``answer(request, prompt)``; records every call."""

    def __init__(self, answer: Callable):
        self.answer = answer
        self.calls: list[tuple] = []

    def complete(self, request, prompt):
        self.calls.append((request, prompt))
        out = self.answer(request, prompt)
        return out if isinstance(out, str) else json.dumps(out)


def scripted_client(answer: Callable, **kw) -> tuple[LvlmClient, ScriptedTransport]:
    t = ScriptedTransport(answer)
    kw.setdefault("backoff_s", 0.0)
    kw.setdefault("max_in_flight", 1)
    return LvlmClient(t, **kw), t


def by_template(**answers) -> Callable:
    """Transport answer function keyed by template id."""
    def answer(request, prompt):
        a = answers[request.template_id]
        return a(request) if callable(a) else a
    return answer


def random_box(rng: np.random.Generator, extent: float = 100.0, max_side: float = 40.0,
               unit: str = "px") -> BBox:
    x0, y0 = rng.uniform(0, extent - 1, 2)
    w, h = rng.uniform(0.5, max_side, 2)
    x1, y1 = min(x0 + w, extent), min(y0 + h, extent)
    if unit == "norm":
        return BBox(x0 / extent, y0 / extent, x1 / extent, y1 / extent, unit="norm")
    return BBox(x0, y0, x1, y1)


def norm_box(cx: float, cy: float, w: float, h: float) -> BBox:
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, unit="norm")


def read_bytes(root: Path, rel: str) -> bytes:
    return (root / rel).read_bytes()
