"""Chat-completion client with caching, retries and a fixture-backed mock.

Backends implement ``send(request) -> ChatResponse``. :class:`LlmClient` wraps a
backend with an optional on-disk cache, exponential backoff on transient
failures, an in-flight concurrency bound and token accounting.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from rhino.preprocess.sampling import estimate_tokens

log = logging.getLogger(__name__)

API_KEY_ENV = "RHINO_API_KEY"
ROLES = ("system", "user", "assistant")


class LlmError(Exception):
    pass


class TransientError(LlmError):
    """Failure worth retrying."""


class RateLimited(TransientError):
    pass


class Timeout(TransientError):
    pass


class ServerError(TransientError):
    pass


class AuthError(LlmError):
    pass


class MockMiss(LlmError):
    def __init__(self, digest: str):
        super().__init__(f"no mock fixture for request digest {digest}")
        self.digest = digest


class NoJsonFound(LlmError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(**m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        if msgs[0].role not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        for m in msgs:
            if m.role not in ROLES:
                raise ValueError(f"unknown role {m.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def with_messages(self, messages) -> "ChatRequest":
        return replace(self, messages=tuple(messages))

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached: bool = False


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def request_digest(request: ChatRequest) -> str:
    payload = {
        "model": request.model,
        "messages": [[m.role, _normalize_ws(m.content)] for m in request.messages],
        "temperature": float(request.temperature),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class MockBackend:
    """Replays ``<digest>.txt`` fixtures from a directory."""

    kind = "mock"

    def __init__(self, fixtures_dir: str | Path):
        self.fixtures_dir = Path(fixtures_dir)

    def send(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        path = self.fixtures_dir / f"{digest}.txt"
        if not path.is_file():
            raise MockMiss(digest)
        content = path.read_text(encoding="utf-8")
        return ChatResponse(
            content,
            prompt_tokens=estimate_tokens(request.prompt_text),
            completion_tokens=estimate_tokens(content),
        )


class FunctionBackend:
    """Answers with a Python callable; handy for scripted tests and fixture recording."""

    kind = "function"

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        content = self.fn(request)
        return ChatResponse(
            content,
            prompt_tokens=estimate_tokens(request.prompt_text),
            completion_tokens=estimate_tokens(content),
        )


class RecordingBackend:
    """Passes requests through and stores each answer as a mock fixture."""

    kind = "recording"

    def __init__(self, inner: Backend, fixtures_dir: str | Path):
        self.inner = inner
        self.fixtures_dir = Path(fixtures_dir)
        self.fixtures_dir.mkdir(parents=True, exist_ok=True)

    def send(self, request: ChatRequest) -> ChatResponse:
        resp = self.inner.send(request)
        path = self.fixtures_dir / f"{request_digest(request)}.txt"
        path.write_text(resp.content, encoding="utf-8")
        return resp


class HttpBackend:
    """OpenAI-compatible ``POST <base_url>/chat/completions``."""

    kind = "http-openai-compatible"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.api_key:
            raise AuthError(f"environment variable {API_KEY_ENV} is not set")
        self.client = client or httpx.Client(timeout=timeout)

    def send(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        try:
            resp = self.client.post(self.url, json=body, headers=headers)
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise ServerError(f"transport error: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 429:
            raise RateLimited("HTTP 429")
        if resp.status_code == 408:
            raise Timeout("HTTP 408")
        if resp.status_code >= 500:
            raise ServerError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            content = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"unexpected response shape: {str(data)[:200]}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            content,
            prompt_tokens=int(usage.get("prompt_tokens", estimate_tokens(request.prompt_text))),
            completion_tokens=int(usage.get("completion_tokens", estimate_tokens(content))),
        )


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class RetryPolicy:
    base_s: float = 1.0
    factor: float = 2.0
    max_attempts: int = 5

    def delay(self, attempt: int) -> float:
        """Wait after the ``attempt``-th failed try (1-based)."""
        return self.base_s * self.factor ** (attempt - 1)


@dataclass
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    cached_calls: int = 0

    def add(self, resp: ChatResponse) -> None:
        self.calls += 1
        if resp.cached:
            self.cached_calls += 1
        self.prompt_tokens += resp.prompt_tokens
        self.completion_tokens += resp.completion_tokens

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "calls": self.calls,
            "cached_calls": self.cached_calls,
        }


class LlmClient:
    def __init__(
        self,
        backend: Backend,
        cache: bool = True,
        cache_dir: str | Path | None = None,
        max_in_flight: int = 4,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache_enabled = cache
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.retry = retry or RetryPolicy()
        self.sleep = sleep
        self.usage = TokenUsage()
        self._memory: dict[str, ChatResponse] = {}
        self._cache_lock = threading.Lock()
        self._usage_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    def _cache_path(self, digest: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def _cache_get(self, digest: str) -> ChatResponse | None:
        with self._cache_lock:
            hit = self._memory.get(digest)
            if hit is None and self.cache_dir:
                path = self._cache_path(digest)
                if path.is_file():
                    hit = ChatResponse(**json.loads(path.read_text(encoding="utf-8")))
                    self._memory[digest] = hit
        return replace(hit, cached=True) if hit else None

    def _cache_put(self, digest: str, resp: ChatResponse) -> None:
        stored = replace(resp, cached=False)
        with self._cache_lock:
            self._memory[digest] = stored
            if self.cache_dir:
                path = self._cache_path(digest)
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps(stored.__dict__), encoding="utf-8")
                tmp.replace(path)

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        if self.cache_enabled:
            hit = self._cache_get(digest)
            if hit is not None:
                self._record(hit)
                return hit
        resp = self._send_with_retry(request)
        if self.cache_enabled:
            self._cache_put(digest, resp)
        self._record(resp)
        return resp

    def _record(self, resp: ChatResponse) -> None:
        with self._usage_lock:
            self.usage.add(resp)

    def _send_with_retry(self, request: ChatRequest) -> ChatResponse:
        attempt = 1
        while True:
            try:
                with self._slots:
                    return self.backend.send(request)
            except TransientError as exc:
                if attempt >= self.retry.max_attempts:
                    raise
                wait = self.retry.delay(attempt)
                log.warning("attempt %d failed (%s); retrying in %.1fs", attempt, exc, wait)
                self.sleep(wait)
                attempt += 1


# ---------------------------------------------------------------------------
# JSON extraction
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.DOTALL)


def _balanced_end(text: str, start: int) -> int | None:
    stack = []
    in_str = False
    escape = False
    pairs = {"{": "}", "[": "]"}
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in pairs:
            stack.append(pairs[ch])
        elif ch in "}]":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return i + 1
    return None


def _scan(text: str) -> Any:
    for i, ch in enumerate(text):
        if ch not in "{[":
            continue
        end = _balanced_end(text, i)
        if end is None:
            continue
        try:
            return json.loads(text[i:end])
        except json.JSONDecodeError:
            continue
    raise NoJsonFound("no JSON object or array in model output")


def extract_json(content: str) -> Any:
    """Parse the first balanced JSON object or array in ``content``.

    Fenced code blocks are tried first, then the raw text.
    """
    for block in _FENCE_RE.findall(content):
        try:
            return _scan(block)
        except NoJsonFound:
            continue
    return _scan(content)


def backend_from_config(cfg: dict, base_dir: Path | None = None) -> Backend:
    kind = cfg.get("kind", "mock")
    base_dir = base_dir or Path.cwd()
    if kind == "mock":
        fixtures = cfg.get("fixtures_dir")
        if not fixtures:
            raise ValueError("mock backend needs backend.fixtures_dir")
        return MockBackend(base_dir / fixtures)
    if kind in ("http", "http-openai-compatible", "openai"):
        if not cfg.get("base_url"):
            raise ValueError("http backend needs backend.base_url")
        return HttpBackend(cfg["base_url"], timeout=float(cfg.get("timeout_s", 60.0)))
    raise ValueError(f"unknown backend kind {kind!r}")
