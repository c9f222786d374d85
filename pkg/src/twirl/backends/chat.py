"""HTTP chat-completions client with retries and multimodal message encoding."""

from __future__ import annotations

import base64
import logging
import mimetypes
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from ..errors import BackendError
from ..protocol import Message

log = logging.getLogger(__name__)

TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}
_WIRE_ROLE = {"system": "system", "user": "user", "assistant": "assistant", "tool_response": "user"}
_BLOCK = re.compile(r"image path: [^\n]*\nimage width: \d+\nimage height: \d+")


@dataclass
class ChatRequest:
    model_id: str
    messages: Sequence[Message]
    sampling: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")


@dataclass
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: dict = field(default_factory=dict)
    retries: int = 0


def image_part(path: str, mode: str = "data_url") -> dict:
    if mode == "path":
        return {"type": "image_url", "image_url": {"url": path}}
    mime = mimetypes.guess_type(path)[0] or "image/png"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


def encode_message(msg: Message, image_mode: str = "data_url") -> dict:
    """Wire form of one message; each image precedes its metadata block."""
    role = _WIRE_ROLE[msg.role]
    if not msg.image_refs:
        return {"role": role, "content": [{"type": "text", "text": msg.text}]}
    blocks = list(_BLOCK.finditer(msg.text))
    parts: list[dict] = []
    if len(blocks) == len(msg.image_refs):
        pos = 0
        for ref, m in zip(msg.image_refs, blocks):
            if m.start() > pos:
                parts.append({"type": "text", "text": msg.text[pos:m.start()]})
            parts.append(image_part(ref.path, image_mode))
            pos = m.start()
        parts.append({"type": "text", "text": msg.text[pos:]})
    else:
        parts = [image_part(r.path, image_mode) for r in msg.image_refs]
        parts.append({"type": "text", "text": msg.text})
    return {"role": role, "content": parts}


class ChatClient:
    """One completion per call against an OpenAI-compatible endpoint.

    Transient failures (connection errors, 408/429/5xx) are retried with
    exponential backoff; the retry count is reported on the response.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        max_retries: int = 3,
        backoff: float = 0.5,
        backoff_max: float = 8.0,
        timeout: float = 120.0,
        image_mode: str = "data_url",
        max_concurrency: int | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        url = endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        self.url = url
        self.max_retries = max_retries
        self.backoff = backoff
        self.backoff_max = backoff_max
        self.image_mode = image_mode
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_concurrency) if max_concurrency else None
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def close(self):
        self._http.close()

    def chat(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model_id,
            "messages": [encode_message(m, self.image_mode) for m in request.messages],
            **request.sampling,
        }
        if self._slots:
            with self._slots:
                return self._post(body)
        return self._post(body)

    def _post(self, body: dict) -> ChatResponse:
        last = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(min(self.backoff * 2 ** (attempt - 1), self.backoff_max))
            try:
                r = self._http.post(self.url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("chat attempt %d failed: %s", attempt + 1, last)
                continue
            if r.status_code in TRANSIENT_STATUS:
                last = f"HTTP {r.status_code}"
                log.warning("chat attempt %d failed: %s", attempt + 1, last)
                continue
            if not r.is_success:
                raise BackendError("remote", f"HTTP {r.status_code}: {r.text[:500]}")
            return _parse_response(r, attempt)
        raise BackendError("io", f"gave up after {self.max_retries + 1} attempts ({last})")


def _parse_response(r: httpx.Response, retries: int) -> ChatResponse:
    try:
        data = r.json()
        choice = data["choices"][0]
        text = choice["message"]["content"]
        finish = choice.get("finish_reason") or "stop"
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError("remote", f"malformed response body: {exc!r}") from None
    if isinstance(text, list):  # content-part arrays from some servers
        text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
    if text is None and finish == "stop":
        raise BackendError("remote", "response has no text")
    return ChatResponse(text or "", finish, data.get("usage") or {}, retries)
