"""Hash-keyed fixture replay.

Fixture layout: one file per request, ``<dir>/<key>.json``, where ``key``
is :meth:`LvlmRequest.key` (sha256 over template id, template version,
sorted slots and image pixel digest). The file holds the raw response text
exactly as the model would return it.
"""

from __future__ import annotations

from pathlib import Path

from .client import LvlmError, LvlmRequest
from .schema import EMPTY_RESPONSES


class MockMissError(LvlmError):
    def __init__(self, key: str, template_id: str):
        super().__init__(f"no fixture for request {key} ({template_id})")
        self.key = key
        self.template_id = template_id


class MockStore:
    """Read-only responder. ``strict=False`` answers unknown keys with an empty proposal."""

    def __init__(self, fixture_dir, strict: bool = True):
        self.root = Path(fixture_dir)
        if not self.root.is_dir():
            raise LvlmError(f"mock fixture directory not found: {self.root}")
        self.strict = strict

    def path_for(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def complete(self, request: LvlmRequest, prompt: str) -> str:
        key = request.key()
        path = self.path_for(key)
        if path.exists():
            return path.read_bytes().decode("utf-8")
        if self.strict:
            raise MockMissError(key, request.template_id)
        return EMPTY_RESPONSES[request.template_id]


class RecordingTransport:
    """Wraps another transport and stores every answer as a fixture file."""

    def __init__(self, inner, fixture_dir):
        self.inner = inner
        self.root = Path(fixture_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def complete(self, request: LvlmRequest, prompt: str) -> str:
        raw = self.inner.complete(request, prompt)
        (self.root / f"{request.key()}.json").write_bytes(raw.encode("utf-8"))
        return raw
