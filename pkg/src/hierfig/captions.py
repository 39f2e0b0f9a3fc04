"""Deterministic caption decomposition.

Splits a composite caption into sentence/clause fragments, extracts panel
identifiers from each fragment, finds marker keywords, and routes fragments
to panels by identifier.

Identifier grammar (matching is case-insensitive, parsing keeps case):

* single letters ``A``..``Z`` and Roman numerals ``I``..``XII``
* ranges with ``-``, en dash or em dash: ``A-C``, ``ii-iv``
* lists joined by ``,``, ``and`` or ``&``: ``(A, B)``, ``(A and C-E)``
* accepted positions: parenthesized anywhere ``(A)``; at fragment start
  followed by ``)``, ``.`` or ``:`` (``A)``, ``A.``, ``A:``); after the word
  ``panel``/``panels`` (``Panels A-C show ...``)

A range whose endpoints are both Roman numerals is expanded as Roman when
either endpoint has more than one character or both are drawn from
``I``/``V``/``X`` (so ``I-V`` is I, II, III, IV, V); otherwise ranges expand
over letters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII")
_ROMAN_VALUE = {r: i + 1 for i, r in enumerate(ROMAN)}

MARKER_LEXICON = ("arrow", "arrowhead", "asterisk", "star", "circle", "dashed box",
                  "inset", "bracket")
ABBREVIATIONS = ("fig.", "figs.", "et al.", "vs.", "e.g.", "i.e.", "approx.", "ca.",
                 "cf.", "no.", "resp.", "ref.", "refs.", "dr.", "sp.", "spp.")

_ID = r"(?:XII|XI|IX|X|VIII|VII|VI|IV|V|III|II|I|[A-Z])(?![A-Za-z0-9])"
_ITEM = rf"{_ID}(?:\s*[-–—]\s*{_ID})?"
_LIST = rf"{_ITEM}(?:\s*(?:,|&|\band\b)\s*{_ITEM})*"

_PAREN_RE = re.compile(rf"\(\s*({_LIST})\s*\)", re.IGNORECASE)
_LEAD_RE = re.compile(rf"^\s*({_LIST})\s*[).:](?=\s|$)", re.IGNORECASE)
_PANEL_RE = re.compile(rf"\bpanels?\s+({_LIST})", re.IGNORECASE)
_ITEM_RE = re.compile(_ITEM, re.IGNORECASE)
_ID_ONLY_RE = re.compile(rf"^\s*\(?\s*{_LIST}\s*[).:]?\s*$", re.IGNORECASE)
_FULL_ID_RE = re.compile(rf"^{_ID}$", re.IGNORECASE)
_CONJUNCTIONS = ("and", "or", "&", "to", "through", "vs", "versus", "in", "of", "from", "see")


def is_identifier(text: str) -> bool:
    return bool(_FULL_ID_RE.match(text or ""))


def identifier_key(text: str) -> str:
    return text.strip().upper()


def _is_roman(tok: str) -> bool:
    return tok.upper() in _ROMAN_VALUE


def expand_range(start: str, end: str) -> list[str]:
    """Inclusive run from ``start`` to ``end``, keeping the case of ``start``."""
    lower = start.islower()
    s, e = start.upper(), end.upper()
    roman = _is_roman(s) and _is_roman(e) and (
        len(s) > 1 or len(e) > 1 or (set(s + e) <= set("IVX"))
    )
    if roman:
        a, b = _ROMAN_VALUE[s], _ROMAN_VALUE[e]
        run = list(ROMAN[a - 1:b]) if a <= b else [s, e]
    elif len(s) == 1 and len(e) == 1:
        a, b = ord(s), ord(e)
        run = [chr(c) for c in range(a, b + 1)] if a <= b else [s, e]
    else:
        run = [s, e]
    return [r.lower() for r in run] if lower else run


def parse_identifier_list(text: str) -> list[str]:
    out: list[str] = []
    for item in re.split(r"\s*(?:,|&|\band\b)\s*", text.strip(), flags=re.IGNORECASE):
        if not _ITEM_RE.fullmatch(item):
            continue
        parts = re.split(r"\s*[-–—]\s*", item)
        out.extend(expand_range(parts[0], parts[1]) if len(parts) == 2 else [parts[0]])
    return out


def find_identifiers(text: str) -> list[str]:
    """Identifier tokens in ``text`` in order of appearance, deduplicated case-insensitively."""
    hits: list[tuple[int, list[str]]] = []
    m = _LEAD_RE.match(text)
    if m:
        hits.append((m.start(1), parse_identifier_list(m.group(1))))
    for rx in (_PAREN_RE, _PANEL_RE):
        for m in rx.finditer(text):
            hits.append((m.start(1), parse_identifier_list(m.group(1))))
    hits.sort(key=lambda h: h[0])
    seen: set[str] = set()
    out: list[str] = []
    for _, ids in hits:
        for i in ids:
            if identifier_key(i) not in seen:
                seen.add(identifier_key(i))
                out.append(i)
    return out


@dataclass
class CaptionFragment:
    text: str
    anchors: list[str] = field(default_factory=list)
    marker_keywords: list[str] = field(default_factory=list)
    span: tuple[int, int] = (0, 0)  # UTF-8 byte offsets into the source caption
    inherited: bool = False  # anchors copied from the preceding anchored fragment

    @property
    def clean_text(self) -> str:
        """Fragment text with a leading identifier marker removed."""
        t = self.text
        m = _LEAD_RE.match(t) or re.match(rf"^\s*\(\s*{_LIST}\s*\)", t, re.IGNORECASE)
        if m and m.end() < len(t):
            t = t[m.end():]
        return t.strip()


def _word_before(text: str, pos: int) -> str:
    m = re.search(r"(\S+)\s*$", text[:pos])
    return m.group(1).lower().strip(",;:") if m else ""


def _boundaries(caption: str, abbreviations: Sequence[str]) -> list[int]:
    """Character positions where a new fragment starts."""
    abbrevs = tuple(a.lower() for a in abbreviations)
    cuts: list[int] = []
    start = 0
    # terminal punctuation followed by whitespace and a plausible sentence opener
    for m in re.finditer(r"[.!?;](?=\s+[\"'(\[A-Z0-9])", caption):
        end = m.end()
        piece = caption[start:end]
        low = piece.lower().rstrip()
        if m.group(0) == "." and any(
            re.search(r"(?:^|[^a-z])" + re.escape(a) + "$", low) for a in abbrevs
        ):
            continue
        if _ID_ONLY_RE.match(piece):
            continue
        nxt = end + len(caption[end:]) - len(caption[end:].lstrip())
        cuts.append(nxt)
        start = nxt
    cuts = sorted(set(cuts))

    # inline parenthesized identifiers that open a new clause: "(A) x, (B) y"
    extra: list[int] = []
    bounds = [0] + cuts + [len(caption)]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        seg_start = lo
        for m in _PAREN_RE.finditer(caption, lo, hi):
            if m.start() == seg_start or not caption[seg_start:m.start()].strip():
                continue
            if _word_before(caption, m.start()) in _CONJUNCTIONS:
                continue
            tail = caption[m.end():hi]
            if not re.search(r"[A-Za-z0-9]", tail.split(".")[0] if tail else ""):
                continue
            if not find_identifiers(caption[seg_start:m.start()]):
                continue
            extra.append(m.start())
            seg_start = m.start()
    return sorted(set(cuts + extra))


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def split_fragments(caption: str, abbreviations: Sequence[str] = ABBREVIATIONS,
                    lexicon: Sequence[str] = MARKER_LEXICON) -> list[CaptionFragment]:
    """Sentence/clause fragments covering ``caption`` without overlap.

    Fragments without identifiers inherit the anchors of the nearest
    preceding anchored fragment.
    """
    if not caption or not caption.strip():
        return [CaptionFragment(text="", span=(0, 0))] if caption is not None else []
    cuts = _boundaries(caption, abbreviations)
    bounds = [0] + cuts + [len(caption)]
    frags: list[CaptionFragment] = []
    last_anchors: list[str] = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        raw = caption[lo:hi]
        if not raw.strip():
            continue
        lead = len(raw) - len(raw.lstrip())
        trail = len(raw.rstrip())
        text = raw.strip()
        anchors = find_identifiers(text)
        inherited = False
        if anchors:
            last_anchors = anchors
        elif last_anchors:
            anchors, inherited = list(last_anchors), True
        frags.append(CaptionFragment(
            text=text,
            anchors=anchors,
            marker_keywords=detect_marker_keywords(text, lexicon),
            span=(_byte_offset(caption, lo + lead), _byte_offset(caption, lo + trail)),
            inherited=inherited,
        ))
    return frags


def _lexicon_re(lexicon: Sequence[str]) -> re.Pattern:
    words = sorted(lexicon, key=len, reverse=True)
    alts = "|".join(re.escape(w).replace(r"\ ", r"\s+") for w in words)
    return re.compile(rf"\b({alts})(?:e?s)?\b", re.IGNORECASE)


_DEFAULT_LEXICON_RE = _lexicon_re(MARKER_LEXICON)


def detect_marker_keywords(fragment: Union[CaptionFragment, str],
                           lexicon: Sequence[str] = MARKER_LEXICON) -> list[str]:
    """Every lexicon keyword occurrence (singular form) in reading order."""
    text = fragment.text if isinstance(fragment, CaptionFragment) else fragment
    rx = _DEFAULT_LEXICON_RE if tuple(lexicon) == MARKER_LEXICON else _lexicon_re(lexicon)
    canon = {re.sub(r"\s+", " ", w.lower()): w for w in lexicon}
    return [canon[re.sub(r"\s+", " ", m.group(1).lower())] for m in rx.finditer(text)]


@dataclass
class Routing:
    buckets: dict[str, list[CaptionFragment]]
    global_bucket: list[CaptionFragment]
    orphans: list[tuple[int, str]]  # (fragment index, anchor)
    ambiguous: list[int]  # fragments with several matched anchors or any orphan anchor

    def fragments_for(self, identifier: Optional[str]) -> list[CaptionFragment]:
        """Fragments a panel receives: its own bucket then the global bucket, caption order."""
        own = self.buckets.get(identifier, []) if identifier is not None else []
        ids = {id(f) for f in own} | {id(f) for f in self.global_bucket}
        merged = [f for f in self._order if id(f) in ids]
        return merged

    _order: list[CaptionFragment] = field(default_factory=list, repr=False)


def route_fragments(fragments: Sequence[CaptionFragment],
                    panel_identifiers: Sequence[Optional[str]]) -> Routing:
    """Assign fragments to panels whose identifier matches an anchor.

    Anchor-less fragments, and fragments whose anchors are all unknown,
    land in the global bucket shared by every panel. Unknown anchors are
    reported as orphans.
    """
    if not panel_identifiers:
        raise ValueError("panel_identifiers must be non-empty")
    by_key: dict[str, str] = {}
    for ident in panel_identifiers:
        if ident is not None:
            by_key.setdefault(identifier_key(ident), ident)
    buckets: dict[str, list[CaptionFragment]] = {i: [] for i in by_key.values()}
    global_bucket: list[CaptionFragment] = []
    orphans: list[tuple[int, str]] = []
    ambiguous: list[int] = []
    for idx, frag in enumerate(fragments):
        matched = []
        for a in frag.anchors:
            ident = by_key.get(identifier_key(a))
            if ident is None:
                orphans.append((idx, a))
            elif ident not in matched:
                matched.append(ident)
        for ident in matched:
            buckets[ident].append(frag)
        if not matched:
            global_bucket.append(frag)
        if len(matched) > 1 or any(o[0] == idx for o in orphans):
            ambiguous.append(idx)
    return Routing(buckets=buckets, global_bucket=global_bucket, orphans=orphans,
                   ambiguous=ambiguous, _order=list(fragments))
