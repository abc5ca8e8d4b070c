"""Completion interface over an HTTP chat endpoint or a deterministic script."""
from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx


class GatewayError(RuntimeError):
    pass


class ProviderUnavailable(GatewayError):
    pass


class ScriptUnderrun(GatewayError):
    """The scripted provider ran out of matching responses, which means the test script is too short."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt_text: str
    temperature: float = 1.0
    max_output_tokens: int = 512
    request_tag: str = "generation"

    def __post_init__(self):
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    provider_id: str
    latency: float
    attempt_count: int = 1


class Transcript:
    """Append-only JSON-lines log shared by the gateway and the search loop."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, entry: dict):
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False)
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


class ScriptedProvider:
    """Replays ``(tag_pattern, response_text)`` entries.

    A request gets the first unused entry whose pattern matches the start of
    its tag (``re.match``), so entries for different tags may be interleaved.
    """

    provider_id = "scripted"

    def __init__(self, entries: Sequence[tuple[str, str]]):
        self.entries = [(re.compile(p), text) for p, text in entries]
        self.used = [False] * len(self.entries)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScriptedProvider":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, dict):
            doc = doc["responses"]
        return cls([(e["tag_pattern"], e["response_text"]) for e in doc])

    def fresh(self) -> "ScriptedProvider":
        return ScriptedProvider([(p.pattern, t) for p, t in self.entries])

    def __call__(self, request: CompletionRequest) -> tuple[str, int]:
        with self._lock:
            for i, (pat, text) in enumerate(self.entries):
                if not self.used[i] and pat.match(request.request_tag):
                    self.used[i] = True
                    return text, 1
        raise ScriptUnderrun(f"no scripted response left for tag {request.request_tag!r}")


TRANSIENT_STATUS = {408, 425, 429, 500, 502, 503, 504}


class HttpProvider:
    """OpenAI-style ``/chat/completions`` client with exponential backoff on transient failures."""

    provider_id = "http"

    def __init__(self, endpoint: str, model: str, credential_env: str | None = None,
                 max_attempts: int = 5, base_delay: float = 1.0, max_delay: float = 30.0,
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.credential_env = credential_env
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.sleep = sleep
        self.client = httpx.Client(timeout=timeout, transport=transport)
        self.provider_id = f"http:{model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.credential_env:
            key = os.environ.get(self.credential_env)
            if not key:
                raise ProviderUnavailable(f"environment variable {self.credential_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def __call__(self, request: CompletionRequest) -> tuple[str, int]:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.client.post(self.endpoint, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"], attempt
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ProviderUnavailable(f"malformed provider response: {exc!r}") from exc
                if resp.status_code not in TRANSIENT_STATUS:
                    raise ProviderUnavailable(f"provider returned HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                self.sleep(min(self.base_delay * 2 ** (attempt - 1), self.max_delay))
        raise ProviderUnavailable(f"gave up after {self.max_attempts} attempts (last: {last})")


class RateLimiter:
    """Concurrency cap plus a minimum spacing between request starts; share one per provider."""

    def __init__(self, max_concurrency: int = 1, min_interval: float = 0.0,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self._last_start = None
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep

    def __enter__(self):
        self._slots.acquire()
        if self.min_interval > 0:
            with self._lock:
                now = self.clock()
                if self._last_start is not None and now - self._last_start < self.min_interval:
                    self.sleep(self.min_interval - (now - self._last_start))
                self._last_start = self.clock()
        return self

    def __exit__(self, *exc):
        self._slots.release()
        return False


class Gateway:
    """Routes requests to a provider under a rate limiter and records every exchange.

    Latency is returned to the caller but kept out of the transcript so that
    scripted runs produce byte-identical transcripts.
    """

    def __init__(self, provider, transcript: Transcript | None = None, limiter: RateLimiter | None = None):
        self.provider = provider
        self.transcript = transcript if transcript is not None else Transcript()
        self.limiter = limiter if limiter is not None else RateLimiter()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self.limiter:
            start = time.perf_counter()
            text, attempts = self.provider(request)
            latency = time.perf_counter() - start
        result = CompletionResult(text, self.provider.provider_id, latency, attempts)
        self.transcript.write({
            "event": "completion",
            "tag": request.request_tag,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
            "prompt": request.prompt_text,
            "response": text,
            "provider": result.provider_id,
            "attempts": attempts,
        })
        return result
