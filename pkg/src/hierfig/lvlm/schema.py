"""Template response schemas with lenient coercion.

Coercion table (applied before any rejection):

=============  =========================================================
field kind     accepted inputs
=============  =========================================================
number         int/float; numeric string ``"0.2"``; percentage ``"20%"`` -> 0.2
int            int; integral float; numeric string ``"3"``
bool           true/false; ``"true"``/``"false"``/``"yes"``/``"no"``; 1/0
str            string; numbers are stringified
bbox           4 numbers as list, ``"[a, b, c, d]"`` / ``"a, b, c, d"`` string,
               or ``{x_min, y_min, x_max, y_max}`` object; must satisfy
               ``0 <= min < max <= 1`` on both axes
identifier     string; surrounding brackets and trailing ``.``/``:``
               stripped; a value outside the identifier grammar becomes null
=============  =========================================================

List templates reject individual bad entries and keep the rest; the
response is valid as long as its top-level structure is.
"""

from __future__ import annotations

import json
import math
import re
from typing import Any, Optional

from ..captions import MARKER_LEXICON, is_identifier


class CoercionError(ValueError):
    pass


def extract_json(raw: str) -> Any:
    """Parse the first JSON object in ``raw``, tolerating code fences and chatter."""
    text = raw.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    start = text.find("{")
    if start < 0:
        raise CoercionError("no JSON object found")
    depth = 0
    in_str = False
    esc = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                try:
                    return json.loads(text[start:i + 1])
                except json.JSONDecodeError as exc:
                    raise CoercionError(f"malformed JSON: {exc.msg}") from None
    raise CoercionError("unterminated JSON object")


def to_number(v: Any) -> float:
    if isinstance(v, bool):
        raise CoercionError("boolean is not a number")
    if isinstance(v, (int, float)):
        out = float(v)
    elif isinstance(v, str):
        s = v.strip()
        try:
            out = float(s[:-1]) / 100.0 if s.endswith("%") else float(s)
        except ValueError:
            raise CoercionError(f"not a number: {v!r}") from None
    else:
        raise CoercionError(f"not a number: {v!r}")
    if not math.isfinite(out):
        raise CoercionError("non-finite number")
    return out


def to_int(v: Any) -> int:
    x = to_number(v)
    if x != int(x):
        raise CoercionError(f"not an integer: {v!r}")
    return int(x)


def to_bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)) and v in (0, 1):
        return bool(v)
    if isinstance(v, str) and v.strip().lower() in ("true", "yes", "1", "false", "no", "0"):
        return v.strip().lower() in ("true", "yes", "1")
    raise CoercionError(f"not a boolean: {v!r}")


def to_str(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return str(v)
    raise CoercionError(f"not a string: {v!r}")


def to_bbox(v: Any) -> list[float]:
    if isinstance(v, dict):
        try:
            vals = [v["x_min"], v["y_min"], v["x_max"], v["y_max"]]
        except KeyError as exc:
            raise CoercionError(f"bbox object missing {exc}") from None
    elif isinstance(v, str):
        vals = [p for p in re.split(r"[\s,\[\]()]+", v) if p]
    elif isinstance(v, (list, tuple)):
        vals = list(v)
    else:
        raise CoercionError(f"not a bbox: {v!r}")
    if len(vals) != 4:
        raise CoercionError(f"bbox needs 4 values, got {len(vals)}")
    x0, y0, x1, y1 = (to_number(x) for x in vals)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise CoercionError(f"bbox outside [0,1] or degenerate: {[x0, y0, x1, y1]}")
    return [x0, y0, x1, y1]


def to_identifier(v: Any) -> Optional[str]:
    if v is None:
        return None
    s = to_str(v).strip().strip("()[]").rstrip(".:)").strip()
    if s.lower().startswith("panel "):
        s = s[6:].strip()
    return s if is_identifier(s) else None


def to_str_list(v: Any) -> list[str]:
    if isinstance(v, str):
        v = [p for p in re.split(r"[,\s]+", v) if p]
    if not isinstance(v, (list, tuple)):
        raise CoercionError(f"not a list: {v!r}")
    return [to_str(x) for x in v]


def to_marker_kind(v: Any) -> str:
    s = re.sub(r"\s+", " ", to_str(v).strip().lower())
    if s.endswith("es") and s[:-2] in MARKER_LEXICON:
        s = s[:-2]
    elif s.endswith("s") and s[:-1] in MARKER_LEXICON:
        s = s[:-1]
    return s if s in MARKER_LEXICON else "other"


_COERCE = {
    "str": to_str,
    "int": to_int,
    "bool": to_bool,
    "bbox": to_bbox,
    "identifier": to_identifier,
    "str_list": to_str_list,
    "marker_kind": to_marker_kind,
}

# template -> (top-level list key or None, fields); field = (name, kind, required, default)
SCHEMAS: dict[str, tuple[Optional[str], list[tuple[str, str, bool, Any]]]] = {
    "panel_decompose": ("panels", [
        ("id", "identifier", False, None),
        ("bbox", "bbox", True, None),
        ("description", "str", False, ""),
    ]),
    "caption_segment": ("assignments", [
        ("fragment", "int", True, None),
        ("panels", "str_list", True, None),
    ]),
    "marker_detect": ("markers", [
        ("kind", "marker_kind", False, "other"),
        ("glyph_bbox", "bbox", True, None),
        ("target_bbox", "bbox", False, None),
        ("role", "str", False, ""),
        ("description", "str", False, ""),
    ]),
    "caption_ground": ("objects", [
        ("fragment", "int", True, None),
        ("phrase", "str", False, ""),
        ("bbox", "bbox", True, None),
        ("visible", "bool", True, None),
        ("description", "str", False, ""),
    ]),
    "panel_describe": (None, [("description", "str", True, None)]),
    "region_caption": (None, [("caption", "str", True, None)]),
}

EMPTY_RESPONSES = {
    "panel_decompose": '{"layout": "single", "panels": []}',
    "caption_segment": '{"assignments": []}',
    "marker_detect": '{"markers": []}',
    "caption_ground": '{"objects": []}',
    "panel_describe": '{"description": ""}',
    "region_caption": '{"caption": ""}',
}


def _coerce_entry(obj: Any, fields) -> dict:
    if not isinstance(obj, dict):
        raise CoercionError("entry is not an object")
    out = {}
    for name, kind, required, default in fields:
        v = obj.get(name)
        if v is None:
            if required:
                raise CoercionError(f"missing field {name!r}")
            out[name] = default
            continue
        try:
            out[name] = _COERCE[kind](v)
        except CoercionError:
            if required:
                raise
            out[name] = default
    return out


def validate(template_id: str, raw: str) -> tuple[Optional[dict], bool, list[str]]:
    """Parse ``raw`` against the template's schema.

    Returns ``(payload, valid, problems)``; ``payload`` is ``None`` when the
    top-level structure is unusable.
    """
    list_key, fields = SCHEMAS[template_id]
    problems: list[str] = []
    try:
        obj = extract_json(raw)
    except CoercionError as exc:
        return None, False, [str(exc)]
    if not isinstance(obj, dict):
        return None, False, ["top level is not an object"]

    if list_key is None:
        try:
            payload = _coerce_entry(obj, fields)
        except CoercionError as exc:
            return None, False, [str(exc)]
        text_field = fields[0][0]
        if not payload[text_field].strip():
            return payload, False, [f"empty {text_field!r}"]
        return payload, True, []

    items = obj.get(list_key)
    if items is None:
        return None, False, [f"missing required {list_key!r} array"]
    if isinstance(items, dict):
        items = [items]
    if not isinstance(items, list):
        return None, False, [f"{list_key!r} is not an array"]
    kept = []
    for i, item in enumerate(items):
        try:
            kept.append(_coerce_entry(item, fields))
        except CoercionError as exc:
            problems.append(f"{list_key}[{i}] rejected: {exc}")
    payload = {k: v for k, v in obj.items() if k != list_key and isinstance(v, (str, int, float))}
    payload[list_key] = kept
    return payload, True, problems
