"""Provider-agnostic chat-completion gateway.

One wire shape (OpenAI-style chat completions) reaches every provider,
including local inference servers and the offline mock.  Responses are
cached in a content-addressed append-only directory so interrupted runs
resume without repeating network calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\s*$")


class GatewayError(Exception):
    """Unrecoverable gateway failure (auth, exhausted retries, bad config)."""


class TransientProviderError(GatewayError):
    """Retryable provider failure: timeout, throttling, 5xx."""


class JsonExtractError(GatewayError):
    """No parseable JSON payload could be located in a model response."""


class RequestTag(str, Enum):
    PARTITION = "Partition"
    DOCGEN = "Docgen"
    JUDGE = "Judge"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise GatewayError(f"invalid message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float
    tag: RequestTag
    max_output_tokens: int | None = None
    repetition_index: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if not any(m.role == "user" for m in self.messages):
            raise GatewayError("request needs at least one user message")

    def joined_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    cached: bool = False


def cache_key(request: ChatRequest) -> str:
    """Stable digest of the request identity; repetition_index keeps the
    judge's repeated samples of one prompt apart."""
    payload = json.dumps(
        {
            "model": request.model_id,
            "messages": [[m.role, m.content] for m in request.messages],
            "temperature": request.temperature,
            "repetition_index": request.repetition_index,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only directory of one JSON record per cache key."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        record = json.loads(path.read_text(encoding="utf-8"))
        stored = record["response"]
        return ChatResponse(
            text=stored["text"],
            prompt_tokens=stored.get("prompt_tokens", 0),
            completion_tokens=stored.get("completion_tokens", 0),
            latency_ms=stored.get("latency_ms", 0),
            cached=True,
        )

    def put(self, key: str, request: ChatRequest, response: ChatResponse) -> None:
        path = self._path(key)
        if path.exists():
            return
        record = {
            "key": key,
            "request": {
                "model": request.model_id,
                "messages": [
                    {"role": m.role, "content": m.content} for m in request.messages
                ],
                "temperature": request.temperature,
                "repetition_index": request.repetition_index,
                "tag": request.tag.value,
            },
            "response": {
                "text": response.text,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
                "latency_ms": response.latency_ms,
            },
            "timestamp": time.time(),
        }
        # Unique temp name: concurrent writers of one key must not collide;
        # records for a key are identical, so last rename winning is fine.
        tmp = path.with_suffix(f".{uuid.uuid4().hex}.tmp")
        tmp.write_text(
            json.dumps(record, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )
        os.replace(tmp, path)


class Provider:
    """Base provider: turns a ChatRequest into raw response text."""

    def send(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


class OpenAIChatProvider(Provider):
    """POSTs OpenAI-compatible chat completions to any conforming endpoint."""

    RETRYABLE_STATUS = (408, 409, 429, 500, 502, 503, 504)

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "CHUNKDOC_API_KEY",
        timeout_s: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def send(self, request: ChatRequest) -> ChatResponse:
        import requests

        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise GatewayError(
                f"credential environment variable {self.api_key_env} is not set"
            )
        body = {
            "model": request.model_id,
            "messages": [
                {"role": m.role, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        started = time.monotonic()
        try:
            http = requests.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout_s,
            )
        except requests.Timeout as exc:
            raise TransientProviderError(f"timeout after {self.timeout_s}s") from exc
        except requests.ConnectionError as exc:
            raise TransientProviderError(str(exc)) from exc
        if http.status_code in self.RETRYABLE_STATUS:
            raise TransientProviderError(f"provider returned {http.status_code}")
        if http.status_code in (401, 403):
            raise GatewayError(f"authentication failed ({http.status_code})")
        if http.status_code != 200:
            raise GatewayError(f"provider error {http.status_code}: {http.text[:200]}")
        payload = http.json()
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed provider payload: {payload}") from exc
        usage = payload.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=int((time.monotonic() - started) * 1000),
        )


class MockProvider(Provider):
    """Scriptable offline provider.

    Takes either a handler callable ``(ChatRequest) -> str`` or a fixed list
    of canned response texts consumed in order.  Every request it actually
    services is recorded for assertions.
    """

    def __init__(
        self,
        handler: Callable[[ChatRequest], str] | None = None,
        scripted: list[str] | None = None,
    ):
        if (handler is None) == (scripted is None):
            raise GatewayError("MockProvider needs a handler or a script, not both")
        self._handler = handler
        self._scripted = list(scripted) if scripted is not None else None
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            if self._scripted is not None:
                if not self._scripted:
                    raise GatewayError("mock provider script exhausted")
                text = self._scripted.pop(0)
            else:
                text = self._handler(request)
        return ChatResponse(
            text=text,
            prompt_tokens=len(request.joined_text()) // 4,
            completion_tokens=len(text) // 4,
            latency_ms=0,
        )


@dataclass
class GatewayStats:
    requests: int = 0
    cache_hits: int = 0
    network_calls: int = 0
    retries: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    by_tag: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "requests": self.requests,
            "cache_hits": self.cache_hits,
            "network_calls": self.network_calls,
            "retries": self.retries,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "by_tag": dict(self.by_tag),
        }


class Gateway:
    """Shared entry point for all model traffic.

    Enforces a global in-flight cap and a minimum request spacing, retries
    transient failures with exponential backoff plus jitter (delays are
    non-decreasing within one request), and consults the cache before any
    provider call.
    """

    def __init__(
        self,
        provider: Provider,
        cache_dir: str | Path | None = None,
        max_attempts: int = 4,
        backoff_base_s: float = 0.5,
        rate_limit_per_s: float | None = None,
        max_in_flight: int = 8,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise GatewayError("max_attempts must be >= 1")
        self.provider = provider
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.rate_limit_per_s = rate_limit_per_s
        self.stats = GatewayStats()
        self._sleeper = sleeper
        self._jitter = random.Random()
        self._in_flight = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def _respect_rate_limit(self) -> None:
        if self.rate_limit_per_s is None:
            return
        spacing = 1.0 / self.rate_limit_per_s
        with self._lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + spacing
        if wait > 0:
            self._sleeper(wait)

    def _record(self, request: ChatRequest, response: ChatResponse) -> None:
        with self._lock:
            self.stats.requests += 1
            tag = request.tag.value
            self.stats.by_tag[tag] = self.stats.by_tag.get(tag, 0) + 1
            if response.cached:
                self.stats.cache_hits += 1
            else:
                self.stats.network_calls += 1
                self.stats.prompt_tokens += response.prompt_tokens
                self.stats.completion_tokens += response.completion_tokens

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = cache_key(request)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._record(request, hit)
                return hit
        last_error: Exception | None = None
        with self._in_flight:
            for attempt in range(self.max_attempts):
                self._respect_rate_limit()
                try:
                    response = self.provider.send(request)
                    break
                except TransientProviderError as exc:
                    last_error = exc
                    if attempt == self.max_attempts - 1:
                        raise GatewayError(
                            f"gave up after {self.max_attempts} attempts: {exc}"
                        ) from exc
                    # base * 2^k * (1 + jitter in [0, 1)) never decreases
                    # between consecutive attempts.
                    delay = (
                        self.backoff_base_s
                        * (2**attempt)
                        * (1.0 + self._jitter.random())
                    )
                    with self._lock:
                        self.stats.retries += 1
                    log.debug("transient failure (%s); retrying in %.2fs", exc, delay)
                    self._sleeper(delay)
            else:  # pragma: no cover - loop always breaks or raises
                raise GatewayError(str(last_error))
        if self.cache is not None:
            self.cache.put(key, request, response)
        self._record(request, response)
        return response


def _balanced_candidates(text: str) -> list[str]:
    """Substrings that look like complete top-level JSON objects/arrays."""
    candidates = []
    openers = {"{": "}", "[": "]"}
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in openers:
            depth = 0
            in_string = False
            escaped = False
            for j in range(i, len(text)):
                cj = text[j]
                if in_string:
                    if escaped:
                        escaped = False
                    elif cj == "\\":
                        escaped = True
                    elif cj == '"':
                        in_string = False
                    continue
                if cj == '"':
                    in_string = True
                elif cj in "{[":
                    depth += 1
                elif cj in "}]":
                    depth -= 1
                    if depth == 0:
                        candidates.append(text[i : j + 1])
                        i = j
                        break
        i += 1
    return candidates


def extract_json(text: str):
    """Pull the first parseable JSON object/array out of chatty model output.

    Strips code fences, then scans for balanced top-level objects/arrays and
    returns the first one that parses.
    """
    lines = [line for line in text.splitlines() if not _FENCE_RE.match(line)]
    cleaned = "\n".join(lines).strip()
    if cleaned:
        try:
            return json.loads(cleaned)
        except json.JSONDecodeError:
            pass
    for candidate in _balanced_candidates(cleaned):
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            continue
    raise JsonExtractError(f"no parseable JSON found in response: {text[:120]!r}")


REPAIR_INSTRUCTION = (
    "Your previous reply could not be parsed as JSON. "
    "Respond again with only the JSON payload, no prose and no code fences."
)


def complete_json(gateway: Gateway, request: ChatRequest):
    """Run a request and parse its JSON payload, with one repair re-query.

    Returns ``(parsed_value, final_response)``.
    """
    response = gateway.complete(request)
    try:
        return extract_json(response.text), response
    except JsonExtractError:
        log.warning("unparseable %s response; issuing one repair re-query", request.tag.value)
    repair = ChatRequest(
        model_id=request.model_id,
        messages=request.messages
        + (
            ChatMessage("assistant", response.text),
            ChatMessage("user", REPAIR_INSTRUCTION),
        ),
        temperature=request.temperature,
        tag=request.tag,
        max_output_tokens=request.max_output_tokens,
        repetition_index=request.repetition_index,
    )
    response = gateway.complete(repair)
    return extract_json(response.text), response


def estimate_requests(
    n_comments: int, n_models: int, n_methods: int, coverage: int
) -> int:
    """Evaluation request count for a full grid."""
    values = (n_comments, n_models, n_methods, coverage)
    if any(v <= 0 for v in values):
        raise ValueError(f"all grid factors must be positive, got {values}")
    return n_comments * n_models * n_methods * coverage
