from .client import (
    AuthError,
    HttpTransport,
    LvlmClient,
    LvlmError,
    LvlmRequest,
    LvlmResponse,
    SamplingParams,
    TransportError,
    encode_image,
)
from .mock import MockMissError, MockStore, RecordingTransport
from .prompts import MissingSlotError, TEMPLATE_IDS, render_prompt
from .schema import validate

__all__ = [
    "AuthError", "HttpTransport", "LvlmClient", "LvlmError", "LvlmRequest", "LvlmResponse",
    "SamplingParams", "TransportError", "encode_image", "MockMissError", "MockStore",
    "RecordingTransport", "MissingSlotError", "TEMPLATE_IDS", "render_prompt", "validate",
]
