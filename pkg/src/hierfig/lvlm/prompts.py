"""Versioned prompt templates stored as text assets next to this module."""

from __future__ import annotations

import re
import string
from functools import lru_cache
from importlib import resources

TEMPLATE_IDS = ("panel_decompose", "caption_segment", "panel_describe",
                "marker_detect", "caption_ground", "region_caption")

# slots a caller may omit, with the text substituted instead
OPTIONAL_SLOTS = {
    "marker_detect": {"article_title": "(not available)"},
    "panel_describe": {"identifier": "unlabeled"},
}


class MissingSlotError(KeyError):
    def __init__(self, template_id: str, slot: str):
        super().__init__(f"template {template_id!r} needs slot {slot!r}")
        self.template_id = template_id
        self.slot = slot


class UnknownTemplateError(KeyError):
    pass


@lru_cache(maxsize=None)
def _load(template_id: str) -> tuple[int, str]:
    if template_id not in TEMPLATE_IDS:
        raise UnknownTemplateError(template_id)
    text = resources.files(__package__).joinpath("templates").joinpath(f"{template_id}.txt").read_text("utf-8")
    version = 0
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            m = re.match(r"#\s*version:\s*(\d+)", line)
            if m:
                version = int(m.group(1))
            continue
        body.append(line)
    return version, "\n".join(body).strip() + "\n"


def template_version(template_id: str) -> int:
    return _load(template_id)[0]


def required_slots(template_id: str) -> set[str]:
    _, body = _load(template_id)
    names = {m.group("named") or m.group("braced")
             for m in string.Template.pattern.finditer(body)
             if m.group("named") or m.group("braced")}
    return names - set(OPTIONAL_SLOTS.get(template_id, {}))


def render_prompt(template_id: str, slots: dict) -> str:
    """Substitute ``slots`` into a template; raises :class:`MissingSlotError`."""
    _, body = _load(template_id)
    values = dict(OPTIONAL_SLOTS.get(template_id, {}))
    values.update({k: v for k, v in slots.items() if v is not None})
    for name in sorted(required_slots(template_id)):
        if name not in values:
            raise MissingSlotError(template_id, name)
    return string.Template(body).substitute({k: str(v) for k, v in values.items()})
