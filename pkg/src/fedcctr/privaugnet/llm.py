"""Chat-completion clients: HTTP, deterministic mock, and an on-disk reply cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.4
DEFAULT_TOP_P = 0.45
DEFAULT_MAX_TOKENS = 512


class LLMTransportError(RuntimeError):
    """The endpoint could not be reached or answered with a non-2xx status."""


class LLMTimeoutError(LLMTransportError):
    pass


class LLMStatusError(LLMTransportError):
    def __init__(self, status: int, body: str = "") -> None:
        super().__init__(f"LLM endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple  # of (role, content) pairs
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = DEFAULT_MAX_TOKENS
    model: str = "llama-2-13b-chat"
    attempt: int = 0

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }

    def digest(self, salt: str = "") -> str:
        payload = json.dumps({**self.body(), "attempt": self.attempt, "salt": salt}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ChatReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0
    cached: bool = False


class ChatClient(Protocol):
    def chat(self, request: ChatRequest) -> ChatReply: ...


def _approx_tokens(text: str) -> int:
    return max(1, len(text.split()))


class HTTPChatClient:
    """POSTs chat-completions JSON to ``endpoint``; retries transport failures with backoff."""

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None, timeout: float = 60.0,
                 max_retries: int = 3, backoff: float = 1.0, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.endpoint = endpoint or os.environ.get("LLM_ENDPOINT")
        if not self.endpoint:
            raise LLMTransportError("no LLM endpoint configured (set LLM_ENDPOINT)")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._http.close()

    def _post_once(self, request: ChatRequest) -> ChatReply:
        t0 = time.perf_counter()
        try:
            resp = self._http.post(self.endpoint, json=request.body())
        except httpx.TimeoutException as exc:
            raise LLMTimeoutError(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise LLMTransportError(str(exc)) from exc
        if not 200 <= resp.status_code < 300:
            raise LLMStatusError(resp.status_code, resp.text)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMTransportError(f"unexpected reply shape: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatReply(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)),
                         time.perf_counter() - t0)

    def chat(self, request: ChatRequest) -> ChatReply:
        for attempt in range(self.max_retries + 1):
            try:
                return self._post_once(request)
            except LLMTransportError as exc:
                # client errors other than rate limiting are not worth retrying
                if isinstance(exc, LLMStatusError) and 400 <= exc.status < 500 and exc.status != 429:
                    raise
                if attempt == self.max_retries:
                    raise
                delay = self.backoff * 2 ** attempt
                log.warning("LLM request failed (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                self._sleep(delay)
        raise AssertionError("unreachable")


class CachedChatClient:
    """Wraps a client with one JSON file per request hash under ``cache_dir``."""

    def __init__(self, inner: ChatClient, cache_dir: Path, salt: str = "") -> None:
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.salt = salt
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def chat(self, request: ChatRequest) -> ChatReply:
        key = request.digest(self.salt)
        path = self._path(key)
        if path.exists():
            try:
                data = json.loads(path.read_text())
                with self._lock:
                    self.hits += 1
                return ChatReply(data["text"], data.get("prompt_tokens", 0), data.get("completion_tokens", 0),
                                 0.0, cached=True)
            except (ValueError, KeyError):
                log.warning("ignoring corrupt cache entry %s", path.name)
        reply = self.inner.chat(request)
        record = {"request": request.body(), "attempt": request.attempt, "text": reply.text,
                  "prompt_tokens": reply.prompt_tokens, "completion_tokens": reply.completion_tokens}
        with self._lock:
            self.misses += 1
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(record, fh, sort_keys=True)
            os.replace(tmp, path)
        return reply


def llm_chat(request: ChatRequest, client: ChatClient) -> ChatReply:
    """Send one request and log token counts and latency."""
    reply = client.chat(request)
    log.debug("llm reply: %d prompt / %d completion tokens, %.3fs%s", reply.prompt_tokens,
              reply.completion_tokens, reply.latency_s, " (cached)" if reply.cached else "")
    return reply
