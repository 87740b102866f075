"""Uniform access to generation and embedding backends.

Adds what every stage relies on: exponential-backoff retry on recoverable
HTTP statuses, api-tier response caching (runtime + disk), unit-normalized
embeddings, and a strict-parse helper that retries malformed structured
output with error memory injected into the prompt.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence, TypeVar

import numpy as np
import requests

from .caching import DiskCache, MemoryCache, cache_key
from .errors import (
    BackendError,
    BudgetError,
    ExhaustionError,
    InvalidInputError,
    MalformedOutputError,
)
from .model import ErrorMemory
from .tokens import estimate_tokens

T = TypeVar("T")

RETRYABLE_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


@dataclass
class CompletionRequest:
    prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 4096
    tag: str = "general"  # pipeline stage label; partitions the cache

    def __post_init__(self):
        if not self.prompt:
            raise InvalidInputError("completion prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidInputError("temperature must be within [0, 2]")
        if self.max_output_tokens <= 0:
            raise InvalidInputError("max_output_tokens must be positive")


@dataclass
class BackendProfile:
    context_window: int = 512_000
    retryable_statuses: frozenset[int] = RETRYABLE_STATUSES
    max_attempts: int = 10
    backoff_bounds: tuple[float, float] = (1.0, 300.0)

    def __post_init__(self):
        lo, hi = self.backoff_bounds
        if not lo < hi:
            raise InvalidInputError("backoff bounds must satisfy min < max")
        if self.max_attempts < 1:
            raise InvalidInputError("max_attempts must be >= 1")


@dataclass
class TransportResponse:
    status: int
    text: str


class Transport(Protocol):
    def send(self, request: CompletionRequest) -> TransportResponse: ...


class EmbeddingBackend(Protocol):
    def encode(self, texts: Sequence[str]) -> list[list[float]]: ...


class TransientBackendError(Exception):
    """Raised by embedding backends for failures worth retrying."""


class HttpChatTransport:
    """Chat-completion-style HTTP endpoint. Auth token comes from the
    environment, never from config files."""

    def __init__(self, url: str, model: str, api_key: str = "", timeout: float = 120.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def send(self, request: CompletionRequest) -> TransportResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            # Transport-level failures behave like a retryable 503.
            return TransportResponse(503, f"transport error: {exc}")
        if resp.status_code != 200:
            return TransportResponse(resp.status_code, resp.text)
        return TransportResponse(200, extract_chat_text(resp.json()))


def extract_chat_text(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"unexpected chat completion payload: {exc}") from exc


class HashEmbedder:
    """Deterministic local embedding provider.

    Maps text to a reproducible pseudo-random direction; good enough for
    thresholded cosine filtering in offline runs and tests.
    """

    def __init__(self, dim: int = 32):
        self.dim = dim

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
            rng = np.random.default_rng(seed)
            out.append(rng.standard_normal(self.dim).tolist())
        return out


class HttpEmbedder:
    def __init__(self, url: str, model: str, api_key: str = "", timeout: float = 60.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                self.url,
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code in RETRYABLE_STATUSES:
            raise TransientBackendError(f"status {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"embedding backend status {resp.status_code}", resp.status_code)
        return [item["embedding"] for item in resp.json()["data"]]


class Gateway:
    """Shared entry point for completions and embeddings.

    Thread-safe: the caches take their own locks and retries keep all
    state on the stack. ``sleeper`` is injectable so tests run with a
    deterministic clock (jitter is deliberately disabled).
    """

    def __init__(
        self,
        transport: Transport,
        embedder: Optional[EmbeddingBackend] = None,
        profile: Optional[BackendProfile] = None,
        cache_dir: Optional[str] = None,
        cache_expiry: Optional[float] = None,
        embed_batch_size: int = 32,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.embedder = embedder or HashEmbedder()
        self.profile = profile or BackendProfile()
        self.embed_batch_size = embed_batch_size
        self.sleeper = sleeper
        self._runtime = MemoryCache()
        self._disk = DiskCache(f"{cache_dir}/api", cache_expiry) if cache_dir else None
        self._lock = threading.RLock()
        self.transport_calls = 0
        self.cache_hits = 0

    # -- completions -----------------------------------------------------

    def complete(self, request: CompletionRequest, profile: Optional[BackendProfile] = None) -> str:
        profile = profile or self.profile
        if estimate_tokens(request.prompt) > profile.context_window:
            raise BudgetError(
                f"prompt of ~{estimate_tokens(request.prompt)} tokens exceeds the "
                f"{profile.context_window}-token context window"
            )
        key = cache_key(
            "complete", request.tag, request.temperature, request.max_output_tokens, request.prompt
        )
        cached = self._cache_get(key)
        if cached is not None:
            return cached
        text = self._send_with_retry(request, profile)
        self._cache_set(key, text)
        return text

    def complete_text(
        self,
        prompt: str,
        tag: str,
        temperature: float = 0.0,
        max_output_tokens: int = 4096,
        profile: Optional[BackendProfile] = None,
    ) -> str:
        return self.complete(
            CompletionRequest(
                prompt=prompt,
                temperature=temperature,
                max_output_tokens=max_output_tokens,
                tag=tag,
            ),
            profile,
        )

    def _cache_get(self, key: str) -> Optional[str]:
        value = self._runtime.get(key)
        if value is None and self._disk is not None:
            value = self._disk.get(key)
            if value is not None:
                self._runtime.set(key, value)
        if value is not None:
            with self._lock:
                self.cache_hits += 1
        return value

    def _cache_set(self, key: str, value: str) -> None:
        self._runtime.set(key, value)
        if self._disk is not None:
            self._disk.set(key, value)

    def _send_with_retry(self, request: CompletionRequest, profile: BackendProfile) -> str:
        delay_min, delay_max = profile.backoff_bounds
        delay = delay_min
        last_status = None
        for attempt in range(1, profile.max_attempts + 1):
            response = self.transport.send(request)
            with self._lock:
                self.transport_calls += 1
            if response.status == 200:
                return response.text
            if response.status not in profile.retryable_statuses:
                raise BackendError(
                    f"backend returned status {response.status}", response.status
                )
            last_status = response.status
            if attempt < profile.max_attempts:
                self.sleeper(delay)
                delay = min(delay * 2, delay_max)
        raise ExhaustionError(profile.max_attempts, last_status)

    # -- embeddings ------------------------------------------------------

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """One unit-normalized vector per input text."""
        if not texts:
            raise InvalidInputError("embed() requires at least one text")
        results: dict[int, list[float]] = {}
        missing: list[tuple[int, str]] = []
        for i, text in enumerate(texts):
            key = cache_key("embed", text)
            cached = self._runtime.get(key)
            if cached is None and self._disk is not None:
                cached = self._disk.get(key)
            if cached is not None:
                with self._lock:
                    self.cache_hits += 1
                results[i] = cached
            else:
                missing.append((i, text))
        for start in range(0, len(missing), self.embed_batch_size):
            batch = missing[start : start + self.embed_batch_size]
            vectors = self._encode_with_retry([t for _, t in batch])
            for (i, text), vector in zip(batch, vectors):
                unit = _normalize(vector)
                key = cache_key("embed", text)
                self._runtime.set(key, unit)
                if self._disk is not None:
                    self._disk.set(key, unit)
                results[i] = unit
        return [results[i] for i in range(len(texts))]

    def _encode_with_retry(self, texts: list[str]) -> list[list[float]]:
        delay_min, delay_max = self.profile.backoff_bounds
        delay = delay_min
        last_error = None
        for attempt in range(1, self.profile.max_attempts + 1):
            with self._lock:
                self.transport_calls += 1
            try:
                return self.embedder.encode(texts)
            except TransientBackendError as exc:
                last_error = exc
                if attempt < self.profile.max_attempts:
                    self.sleeper(delay)
                    delay = min(delay * 2, delay_max)
        raise ExhaustionError(self.profile.max_attempts, str(last_error))


def _normalize(vector: Sequence[float]) -> list[float]:
    arr = np.asarray(vector, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise BackendError("embedding backend returned a zero vector")
    return (arr / norm).tolist()


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    return float(np.dot(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))


# -- strict structured output with retry-with-error-memory ----------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def extract_json_payload(text: str) -> Any:
    """Parse the JSON body of a model reply, tolerating code fences and
    surrounding prose. Raises ValueError when nothing parses."""
    candidates = [text.strip()]
    fenced = _FENCE_RE.search(text)
    if fenced:
        candidates.insert(0, fenced.group(1).strip())
    for candidate in candidates:
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            pass
    # Last attempt: widest bracketed span.
    for opener, closer in (("[", "]"), ("{", "}")):
        start, end = text.find(opener), text.rfind(closer)
        if start != -1 and end > start:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("reply carries no parsable JSON payload")


def request_validated(
    gateway: Gateway,
    build_prompt: Callable[[ErrorMemory, int], str],
    parse: Callable[[str], T],
    *,
    tag: str,
    temperature: float = 0.0,
    max_output_tokens: int = 4096,
    profile: Optional[BackendProfile] = None,
    memory: ErrorMemory = ErrorMemory(),
    max_retries: int = 3,
    error_factory: Callable[[str], Exception] = MalformedOutputError,
) -> tuple[T, ErrorMemory, int]:
    """Call the backend until ``parse`` accepts the reply.

    ``parse`` signals a violation by raising ValueError; the message is
    recorded into error memory and echoed into the retry prompt (retry
    prompts also carry the attempt number, so they never collide with the
    cached failing request). Returns (value, memory, calls_made).
    """
    calls = 0
    last_error = "no attempt made"
    for attempt in range(max_retries + 1):
        prompt = build_prompt(memory, attempt)
        reply = gateway.complete(
            CompletionRequest(
                prompt=prompt,
                temperature=temperature,
                max_output_tokens=max_output_tokens,
                tag=tag,
            ),
            profile,
        )
        calls += 1
        try:
            return parse(reply), memory, calls
        except ValueError as exc:
            last_error = str(exc)
            memory = memory.record(last_error)
    raise error_factory(f"output still invalid after {calls} attempts: {last_error}")


def retry_preamble(memory: ErrorMemory, attempt: int) -> str:
    """Standard prefix for retry prompts: error memory plus attempt marker."""
    if attempt == 0 and not memory.entries:
        return ""
    marker = f"(attempt {attempt + 1})\n" if attempt else ""
    return marker + memory.render()


def map_bounded(fn: Callable[[Any], Any], items: Sequence[Any], workers: int = 1) -> list[Any]:
    """Apply ``fn`` over items with a bounded worker pool; results keep the
    input order so downstream merging stays deterministic."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
