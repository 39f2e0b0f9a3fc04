"""The only place that talks to the vision-language model.

Requests go through a *transport*: :class:`HttpTransport` speaks the
OpenAI-compatible chat-completions protocol (as served by vLLM) and
:class:`~hierfig.lvlm.mock.MockStore` replays hash-keyed fixtures. Anything
with a ``complete(request, prompt) -> str`` method works.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

from .prompts import TEMPLATE_IDS, UnknownTemplateError, render_prompt, template_version
from .schema import validate

log = logging.getLogger(__name__)

REPAIR_LINE = "Your previous answer was not valid. Respond with valid JSON only, matching the schema above."

# per-template generation budgets; short captions keep the small budget
DEFAULT_MAX_TOKENS = {
    "panel_decompose": 1024,
    "caption_segment": 1024,
    "marker_detect": 1024,
    "caption_ground": 1024,
    "panel_describe": 128,
    "region_caption": 128,
}

ENV_BASE_URL = "HIERFIG_LVLM_BASE_URL"
ENV_API_KEY = "HIERFIG_LVLM_API_KEY"
ENV_MODEL = "HIERFIG_LVLM_MODEL"


class LvlmError(Exception):
    pass


class TransportError(LvlmError):
    """Network or server failure; worth retrying."""


class AuthError(LvlmError):
    """Credentials rejected; never retried."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.2
    top_p: float = 0.9
    top_k: int = 50
    repetition_penalty: float = 1.05
    max_tokens: int = 128

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k != -1 and self.top_k < 1:
            raise ValueError("top_k must be -1 (disabled) or >= 1")
        if not 0.0 < self.repetition_penalty <= 2.0:
            raise ValueError("repetition_penalty must be in (0, 2]")
        if not 1 <= self.max_tokens <= 32768:
            raise ValueError("max_tokens must be in [1, 32768]")

    @classmethod
    def for_template(cls, template_id: str, **overrides) -> SamplingParams:
        kw = {"max_tokens": DEFAULT_MAX_TOKENS[template_id]}
        kw.update(overrides)
        return cls(**kw)


def encode_image(image) -> tuple[bytes, str]:
    """PNG bytes for the wire and a digest of the decoded pixels.

    The digest covers mode, size and raw pixel bytes, so it does not depend
    on the PNG encoder.
    """
    buf = io.BytesIO()
    image.save(buf, format="PNG", optimize=False)
    h = hashlib.sha256()
    h.update(f"{image.mode}:{image.size[0]}x{image.size[1]}:".encode())
    h.update(image.tobytes())
    return buf.getvalue(), h.hexdigest()


@dataclass
class LvlmRequest:
    template_id: str
    slots: dict[str, Any]
    image_png: Optional[bytes] = None
    image_digest: Optional[str] = None
    sampling: Optional[SamplingParams] = None
    meta: dict[str, Any] = field(default_factory=dict)  # never hashed, never sent

    def __post_init__(self):
        if self.template_id not in TEMPLATE_IDS:
            raise UnknownTemplateError(self.template_id)
        if self.sampling is None:
            self.sampling = SamplingParams.for_template(self.template_id)

    @classmethod
    def with_image(cls, template_id: str, slots: dict, image=None, **kw) -> LvlmRequest:
        png = digest = None
        if image is not None:
            png, digest = encode_image(image)
        return cls(template_id, slots, image_png=png, image_digest=digest, **kw)

    def key(self) -> str:
        """Stable hash of template, template version, slots and image digest."""
        blob = json.dumps(
            {"template_id": self.template_id,
             "version": template_version(self.template_id),
             "slots": {k: self.slots[k] for k in sorted(self.slots)},
             "image": self.image_digest},
            sort_keys=True, ensure_ascii=False, separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class LvlmResponse:
    raw: str
    payload: Optional[dict]
    valid: bool
    attempts: int
    problems: list[str] = field(default_factory=list)


class Transport(Protocol):
    def complete(self, request: LvlmRequest, prompt: str) -> str: ...


class HttpTransport:
    """OpenAI-compatible ``/chat/completions`` over HTTP."""

    def __init__(self, base_url: Optional[str] = None, api_key: Optional[str] = None,
                 model: Optional[str] = None, timeout: float = 120.0, session=None):
        import requests

        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")
        if not self.base_url:
            raise LvlmError(f"no LVLM endpoint configured (set {ENV_BASE_URL} or lvlm.base_url)")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "Qwen/Qwen2.5-VL-72B-Instruct")
        self.timeout = timeout
        self._requests = requests
        self.session = session or requests.Session()

    def build_body(self, request: LvlmRequest, prompt: str) -> dict:
        content: list[dict] = [{"type": "text", "text": prompt}]
        if request.image_png is not None:
            b64 = base64.b64encode(request.image_png).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        s = request.sampling
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": s.temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "repetition_penalty": s.repetition_penalty,
            "max_tokens": s.max_tokens,
        }

    def complete(self, request: LvlmRequest, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(f"{self.base_url}/chat/completions",
                                     json=self.build_body(request, prompt),
                                     headers=headers, timeout=self.timeout)
        except self._requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {exc}") from exc


class LvlmClient:
    """Schema-validated requests with repair retries and bounded concurrency."""

    def __init__(self, transport: Transport, retry_limit: int = 3,
                 transport_retries: int = 3, backoff_s: float = 1.0, max_in_flight: int = 8,
                 sampling_overrides: Optional[dict] = None):
        if retry_limit < 1:
            raise ValueError("retry_limit must be >= 1")
        self.transport = transport
        self.retry_limit = retry_limit
        self.transport_retries = transport_retries
        self.backoff_s = backoff_s
        self.max_in_flight = max_in_flight
        self.sampling_overrides = dict(sampling_overrides or {})
        SamplingParams(**self.sampling_overrides)  # fail early on bad values

    def _call(self, request: LvlmRequest, prompt: str) -> str:
        for attempt in range(self.transport_retries + 1):
            try:
                return self.transport.complete(request, prompt)
            except TransportError:
                if attempt == self.transport_retries:
                    raise
                log.warning("transport failure on %s, retrying", request.template_id)
                if self.backoff_s:
                    time.sleep(self.backoff_s * 2 ** attempt)
        raise AssertionError("unreachable")

    def request(self, request: LvlmRequest) -> LvlmResponse:
        if self.sampling_overrides:
            request.sampling = SamplingParams.for_template(request.template_id, **self.sampling_overrides)
        prompt = render_prompt(request.template_id, request.slots)
        raw, payload, problems = "", None, []
        for attempt in range(1, self.retry_limit + 1):
            raw = self._call(request, prompt)
            payload, ok, problems = validate(request.template_id, raw)
            if ok:
                return LvlmResponse(raw, payload, True, attempt, problems)
            if attempt == 1:
                prompt = prompt + "\n" + REPAIR_LINE + "\n"
        log.info("schema failure on %s after %d attempts: %s",
                 request.template_id, self.retry_limit, "; ".join(problems))
        return LvlmResponse(raw, payload, False, self.retry_limit, problems)

    def request_many(self, requests: Sequence[LvlmRequest]) -> list[LvlmResponse]:
        """Responses in input order; at most ``max_in_flight`` outstanding."""
        if self.max_in_flight <= 1 or len(requests) <= 1:
            return [self.request(r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.request, requests))
