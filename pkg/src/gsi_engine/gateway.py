"""Single abstraction over the external language-model service.

Three interchangeable backends: HttpGateway speaks the de-facto
OpenAI-compatible chat/embeddings REST shape; StubGateway is a pure,
seeded stand-in for fully offline deterministic runs; ReplayGateway
serves a recorded transcript. Secrets come only from environment
variables, never from config files on disk.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx

from .errors import EngineError

ENV_BASE_URL = "GATEWAY_BASE_URL"
ENV_API_KEY = "GATEWAY_API_KEY"
ENV_CHAT_MODEL = "GATEWAY_CHAT_MODEL"
ENV_EMBED_MODEL = "GATEWAY_EMBED_MODEL"

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 1024
STUB_EMBED_DIM = 64


class GatewayError(EngineError):
    code = "gateway_error"


class TransportError(GatewayError):
    pass


class ServiceError(GatewayError):
    def __init__(self, status: int, body: str):
        super().__init__(f"service returned {status}", status=status, body=body[:500])
        self.status = status
        self.body = body


class ExhaustedRetries(GatewayError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last}", attempts=attempts)
        self.attempts = attempts
        self.last = last


class BadRequest(GatewayError):
    pass


class TranscriptMiss(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"no transcript entry for request {key}", key=key)


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request; roles must alternate starting with user."""

    messages: tuple[tuple[str, str], ...]
    system: str = ""
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if not self.messages:
            raise BadRequest("messages must be non-empty")
        for i, (role, _text) in enumerate(self.messages):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise BadRequest(f"message {i} must have role {expected!r}, got {role!r}")
        if self.temperature < 0:
            raise BadRequest("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise BadRequest("max_tokens must be positive")

    def canonical_json(self) -> str:
        return json.dumps(
            {
                "system": self.system,
                "messages": [list(m) for m in self.messages],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
        )


def user_request(text: str, system: str = "", history: Sequence[tuple[str, str]] = (), **kw) -> ChatRequest:
    """Build a ChatRequest from prior (user, assistant) pairs plus a new user turn."""
    messages: list[tuple[str, str]] = []
    for user_text, assistant_text in history:
        messages.append(("user", user_text))
        messages.append(("assistant", assistant_text))
    messages.append(("user", text))
    return ChatRequest(messages=tuple(messages), system=system, **kw)


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ChatResult:
    text: str
    usage: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str
    api_key: str = ""
    chat_model: str = "qwen3-vl-2b-instruct"
    embed_model: str = "text-embedding"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_concurrency: int = 8

    def __post_init__(self):
        if self.timeout <= 0:
            raise BadRequest("timeout must be > 0")
        if self.max_retries < 0:
            raise BadRequest("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        values = {
            "base_url": os.environ.get(ENV_BASE_URL, ""),
            "api_key": os.environ.get(ENV_API_KEY, ""),
        }
        if os.environ.get(ENV_CHAT_MODEL):
            values["chat_model"] = os.environ[ENV_CHAT_MODEL]
        if os.environ.get(ENV_EMBED_MODEL):
            values["embed_model"] = os.environ[ENV_EMBED_MODEL]
        values.update(overrides)
        return cls(**values)


class Gateway(Protocol):
    """Common surface of all gateway backends."""

    chat_model_name: str
    embed_model_name: str

    def chat(self, request: ChatRequest) -> ChatResult: ...

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def _check_embed_inputs(texts: Sequence[str]) -> None:
    if not texts:
        raise BadRequest("texts must be non-empty")
    for i, text in enumerate(texts):
        if not text:
            raise BadRequest(f"text {i} is empty")


class HttpGateway:
    """OpenAI-compatible REST client with bounded retries.

    Retries transport failures, 429, and 5xx with exponential backoff;
    other 4xx raise immediately. Thread-safe: per-request state is local
    and a semaphore caps concurrent in-flight requests.
    """

    RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})

    def __init__(self, config: GatewayConfig, sleep=time.sleep, transport: httpx.BaseTransport | None = None):
        if not config.base_url:
            raise BadRequest(f"no base_url configured (set {ENV_BASE_URL})")
        self.config = config
        self.chat_model_name = config.chat_model
        self.embed_model_name = config.embed_model
        self._sleep = sleep
        self._limiter = threading.Semaphore(config.max_concurrency)
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout,
            headers={"Authorization": f"Bearer {config.api_key}"} if config.api_key else {},
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._limiter:
                    response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_error = TransportError(str(exc))
                continue
            if response.status_code == 200:
                return response.json()
            error = ServiceError(response.status_code, response.text)
            if response.status_code in self.RETRYABLE_STATUSES:
                last_error = error
                continue
            raise error
        raise ExhaustedRetries(attempts, last_error)

    def chat(self, request: ChatRequest) -> ChatResult:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.extend({"role": role, "content": text} for role, text in request.messages)
        data = self._post(
            "/chat/completions",
            {
                "model": self.chat_model_name,
                "messages": messages,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(200, f"malformed completion payload: {data!r}") from exc
        usage = data.get("usage") or {}
        return ChatResult(text=text, usage={k: int(v) for k, v in usage.items() if isinstance(v, (int, float))})

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        _check_embed_inputs(texts)
        data = self._post("/embeddings", {"model": self.embed_model_name, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda row: row["index"])
            vectors = [EmbeddingVector(tuple(float(x) for x in row["embedding"])) for row in rows]
        except (KeyError, TypeError) as exc:
            raise ServiceError(200, f"malformed embedding payload: {data!r}") from exc
        if len(vectors) != len(texts):
            raise ServiceError(200, f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors


def _digest_floats(key: str, count: int) -> list[float]:
    """Deterministic uniforms in (0, 1] from iterated SHA-256 of the key.

    Pure integer/float arithmetic so outputs are identical across
    processes and platforms, independent of any RNG library stream.
    """
    out: list[float] = []
    block = 0
    while len(out) < count:
        digest = hashlib.sha256(f"{key}\x1f{block}".encode("utf-8")).digest()
        for i in range(0, 32, 8):
            if len(out) >= count:
                break
            value = int.from_bytes(digest[i : i + 8], "big")
            out.append((value + 1) / 2.0**64)
        block += 1
    return out


def _hash_to_sphere(key: str, dim: int) -> tuple[float, ...]:
    """Map a key to a deterministic unit vector via Box-Muller gaussians."""
    uniforms = _digest_floats(key, dim + dim % 2)
    values: list[float] = []
    for i in range(0, len(uniforms) - 1, 2):
        radius = math.sqrt(-2.0 * math.log(uniforms[i]))
        angle = 2.0 * math.pi * uniforms[i + 1]
        values.append(radius * math.cos(angle))
        values.append(radius * math.sin(angle))
    values = values[:dim]
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        values[0] = 1.0
        norm = 1.0
    return tuple(v / norm for v in values)


class StubGateway:
    """Pure, seeded stand-in for the model service.

    chat returns text deterministically derived from (seed, request) and
    always carries a standalone 1-5 rating digit so judge-style parsing
    stays deterministic offline. embed maps (seed, text) onto the unit
    sphere. Both are pure functions of their inputs.
    """

    def __init__(self, seed: int = 0, embed_dim: int = STUB_EMBED_DIM, chat_model: str | None = None):
        self.seed = seed
        self.embed_dim = embed_dim
        self.chat_model_name = chat_model or f"stub-chat-{seed}"
        self.embed_model_name = f"stub-embed-{seed}-d{embed_dim}"

    def chat(self, request: ChatRequest) -> ChatResult:
        digest = hashlib.sha256(
            f"{self.seed}|{self.chat_model_name}|chat|{request.canonical_json()}".encode("utf-8")
        ).digest()
        rating = digest[0] % 5 + 1
        text = f"stub-answer-{digest.hex()[:12]} rating {rating}"
        prompt_chars = len(request.system) + sum(len(t) for _, t in request.messages)
        return ChatResult(text=text, usage={"prompt_tokens": prompt_chars // 4, "completion_tokens": len(text) // 4})

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        _check_embed_inputs(texts)
        return [EmbeddingVector(_hash_to_sphere(f"{self.seed}|embed|{text}", self.embed_dim)) for text in texts]


def stub_gateway(seed: int = 0, embed_dim: int = STUB_EMBED_DIM) -> StubGateway:
    return StubGateway(seed=seed, embed_dim=embed_dim)


def _transcript_key(kind: str, payload: str) -> str:
    return hashlib.sha256(f"{kind}|{payload}".encode("utf-8")).hexdigest()


class RecordingGateway:
    """Wraps another gateway and appends (request hash, response) to a jsonl transcript."""

    def __init__(self, inner: Gateway, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.chat_model_name = inner.chat_model_name
        self.embed_model_name = inner.embed_model_name
        self._lock = threading.Lock()

    def _append(self, row: dict) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")

    def chat(self, request: ChatRequest) -> ChatResult:
        result = self.inner.chat(request)
        key = _transcript_key("chat", request.canonical_json())
        self._append({"kind": "chat", "key": key, "text": result.text, "usage": result.usage})
        return result

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        vectors = self.inner.embed(texts)
        for text, vector in zip(texts, vectors):
            key = _transcript_key("embed", text)
            self._append({"kind": "embed", "key": key, "values": list(vector.values)})
        return vectors


class ReplayGateway:
    """Serves chat/embed responses from a recorded transcript; misses raise."""

    def __init__(self, path: str | Path, chat_model: str = "replay", embed_model: str = "replay"):
        self.chat_model_name = chat_model
        self.embed_model_name = embed_model
        self._chat: dict[str, dict] = {}
        self._embed: dict[str, list[float]] = {}
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["kind"] == "chat":
                    self._chat[row["key"]] = row
                else:
                    self._embed[row["key"]] = row["values"]

    def chat(self, request: ChatRequest) -> ChatResult:
        key = _transcript_key("chat", request.canonical_json())
        if key not in self._chat:
            raise TranscriptMiss(key)
        row = self._chat[key]
        return ChatResult(text=row["text"], usage=dict(row.get("usage") or {}))

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        _check_embed_inputs(texts)
        vectors = []
        for text in texts:
            key = _transcript_key("embed", text)
            if key not in self._embed:
                raise TranscriptMiss(key)
            vectors.append(EmbeddingVector(tuple(self._embed[key])))
        return vectors


class _RenamedGateway:
    """Pass-through view that only relabels the chat model name."""

    def __init__(self, inner: Gateway, chat_model: str):
        self._inner = inner
        self.chat_model_name = chat_model
        self.embed_model_name = inner.embed_model_name

    def chat(self, request: ChatRequest) -> ChatResult:
        return self._inner.chat(request)

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return self._inner.embed(texts)


def with_chat_model(gateway: Gateway, chat_model: str) -> Gateway:
    """A view of the gateway addressing a different chat model, e.g. a
    fine-tuned checkpoint. Embeddings are untouched, so vector indexes
    built against the original gateway remain valid.
    """
    if isinstance(gateway, HttpGateway):
        return HttpGateway(replace(gateway.config, chat_model=chat_model), sleep=gateway._sleep)
    if isinstance(gateway, StubGateway):
        return StubGateway(seed=gateway.seed, embed_dim=gateway.embed_dim, chat_model=chat_model)
    return _RenamedGateway(gateway, chat_model)


def sum_usage(usages: Iterable[dict[str, int]]) -> dict[str, int]:
    totals: dict[str, int] = {}
    for usage in usages:
        for key, value in usage.items():
            totals[key] = totals.get(key, 0) + value
    return totals
