"""Uniform chat interface over live HTTP endpoints and deterministic scripted models.

Every completion reports token usage alongside its text samples. Scripted
backends count whitespace-delimited tokens so cost arithmetic stays exactly
reproducible; live backends pass through provider-reported usage. Multi-sample
requests against scripted backends bill input tokens once (native sampling),
while the live backend issues independent single-sample calls and bills each.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

_TOKEN_BOUNDARY_RE = re.compile(r"\S+")

DEFAULT_MAX_OUTPUT_TOKENS = 4096
DEFAULT_TEMPERATURE = 0.1


class GatewayError(Exception):
    """Base class for model-call failures."""


class TransportError(GatewayError):
    """Network-level failure that survived the retry policy."""


class AuthError(GatewayError):
    """Credential rejection; retrying cannot help."""


class ProviderRefusal(GatewayError):
    """Provider declined the request; message passed through verbatim."""


def count_tokens(text: str) -> int:
    """Whitespace-delimited token count; the scripted backends' usage unit."""
    return len(text.split())


def truncate_to_tokens(text: str, max_tokens: int) -> str:
    """Cut text after its max_tokens-th whitespace token, preserving layout."""
    if max_tokens < 0:
        raise GatewayError("max_tokens must be non-negative")
    for i, match in enumerate(_TOKEN_BOUNDARY_RE.finditer(text)):
        if i == max_tokens:
            return text[:match.start()].rstrip()
    return text


@dataclass(frozen=True)
class ModelSpec:
    """How to reach one model and how to bill it."""

    model_id: str
    role: str  # teacher | student | verifier
    backend: str  # "scripted" | "live-endpoint"
    pricing_key: str
    behavior: dict[str, Any] = field(default_factory=dict)
    endpoint: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    n_samples: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.n_samples < 1:
            raise GatewayError("n_samples must be >= 1")
        if self.max_output_tokens < 1:
            raise GatewayError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class ChatResponse:
    samples: tuple[str, ...]
    usage: tuple[tuple[int, int], ...]  # (input_tokens, output_tokens) per sample
    model_id: str

    def __post_init__(self):
        if len(self.samples) != len(self.usage):
            raise GatewayError("usage must carry one entry per sample")
        for inp, out in self.usage:
            if inp < 0 or out < 0:
                raise GatewayError("usage counts must be non-negative")

    @property
    def total_input_tokens(self) -> int:
        return sum(u[0] for u in self.usage)

    @property
    def total_output_tokens(self) -> int:
        return sum(u[1] for u in self.usage)


class ChatBackend(Protocol):
    def complete(self, req: ChatRequest) -> tuple[str, ...]:
        """Return n_samples raw sample texts."""


class TokenBucket:
    """Simple shared rate limiter: ``rate`` tokens per second, burst ``capacity``."""

    def __init__(self, rate: float, capacity: float):
        self.rate = rate
        self.capacity = capacity
        self._tokens = capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self, amount: float = 1.0) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= amount:
                    self._tokens -= amount
                    return
                wait = (amount - self._tokens) / self.rate
            time.sleep(wait)


class LiveEndpointBackend:
    """OpenAI-style chat-completions client.

    Multi-sample requests are issued as independent single-sample calls so
    per-sample usage is exact. Transport failures retry up to three attempts
    with exponential backoff before surfacing as :class:`TransportError`.
    """

    RETRIES = 3

    def __init__(self, spec: ModelSpec, post_fn: Callable[..., Any] | None = None,
                 backoff_base: float = 1.0):
        self.spec = spec
        self.url = spec.endpoint.get("url", "")
        self.model_name = spec.endpoint.get("model", spec.model_id)
        self.timeout = float(spec.endpoint.get("timeout", 60.0))
        auth_env = spec.endpoint.get("auth_env")
        self.api_key = os.environ.get(auth_env) if auth_env else None
        self.backoff_base = backoff_base
        if post_fn is None:
            import requests

            post_fn = requests.post
        self._post = post_fn
        self.last_usage: list[tuple[int, int]] = []

    def _single_call(self, req: ChatRequest, seed: int | None) -> tuple[str, tuple[int, int]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload: dict[str, Any] = {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if seed is not None:
            payload["seed"] = seed
        last_exc: Exception | None = None
        for attempt in range(self.RETRIES):
            try:
                resp = self._post(self.url, json=payload, headers=headers,
                                  timeout=self.timeout)
            except Exception as exc:  # connection/timeout level
                last_exc = exc
                time.sleep(self.backoff_base * (2 ** attempt))
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code >= 500:
                last_exc = TransportError(f"HTTP {resp.status_code}")
                time.sleep(self.backoff_base * (2 ** attempt))
                continue
            body = resp.json()
            if "error" in body:
                raise ProviderRefusal(str(body["error"]))
            choice = body["choices"][0]
            usage = body.get("usage", {})
            return (choice["message"]["content"],
                    (int(usage.get("prompt_tokens", 0)),
                     int(usage.get("completion_tokens", 0))))
        raise TransportError(f"request failed after {self.RETRIES} attempts: {last_exc}")

    def complete(self, req: ChatRequest) -> tuple[str, ...]:
        samples = []
        self.last_usage = []
        for i in range(req.n_samples):
            seed = None if req.seed is None else req.seed + i
            text, usage = self._single_call(req, seed)
            samples.append(text)
            self.last_usage.append(usage)
        return tuple(samples)


class Gateway:
    """Dispatches chat requests to the backend registered for each model.

    Stateless per call apart from an invocation counter used to reconcile the
    ledger (every sample produced must be logged exactly once downstream).
    """

    def __init__(self, rate_limiter: TokenBucket | None = None):
        self._backends: dict[str, tuple[ModelSpec, ChatBackend]] = {}
        self._rate_limiter = rate_limiter
        self._sample_count = 0
        self._lock = threading.Lock()

    def register(self, spec: ModelSpec, backend: ChatBackend) -> None:
        self._backends[spec.model_id] = (spec, backend)

    def spec_for(self, model_id: str) -> ModelSpec:
        return self._backends[model_id][0]

    @property
    def sample_count(self) -> int:
        return self._sample_count

    def complete(self, model_id: str, req: ChatRequest) -> ChatResponse:
        if model_id not in self._backends:
            raise GatewayError(f"no backend registered for model {model_id!r}")
        spec, backend = self._backends[model_id]
        if self._rate_limiter is not None:
            self._rate_limiter.acquire()
        raw_samples = backend.complete(req)
        if len(raw_samples) != req.n_samples:
            raise GatewayError(
                f"backend for {model_id!r} returned {len(raw_samples)} samples, "
                f"expected {req.n_samples}"
            )
        samples = tuple(truncate_to_tokens(s, req.max_output_tokens) for s in raw_samples)
        if isinstance(backend, LiveEndpointBackend):
            usage = tuple(backend.last_usage)
        else:
            # Scripted backends sample natively: bill the prompt once.
            prompt_tokens = count_tokens(req.system_text) + count_tokens(req.user_text)
            usage = tuple(
                (prompt_tokens if i == 0 else 0, count_tokens(s))
                for i, s in enumerate(samples)
            )
        with self._lock:
            self._sample_count += len(samples)
        return ChatResponse(samples=samples, usage=usage, model_id=model_id)
