"""Chat-completion and embedding access with retries, mocks, and replay.

Three interchangeable backends sit behind one interface: ``HttpBackend``
speaks the OpenAI-compatible wire format, ``MockBackend`` answers from a
pure responder function, and ``ReplayBackend`` serves a recorded transcript
by position.  A ``RecordingBackend`` wrapper captures every exchange so any
run can be replayed bit-for-bit later.  API keys are resolved from the
environment or a credentials file, never from experiment configs, which are
committed artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import requests

from .parsing import RawResponse

MOCK_TIMESTAMP = "1970-01-01T00:00:00Z"
DEFAULT_API_KEY_ENV = "DSM_FORGE_API_KEY"
EMBED_DIM = 256


class GatewayError(Exception):
    pass


class Transport(GatewayError):
    pass


class Timeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class HttpStatus(GatewayError):
    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"HTTP {code}: {detail}" if detail else f"HTTP {code}")
        self.code = code


class MalformedServerReply(GatewayError):
    pass


class TranscriptExhausted(GatewayError):
    pass


class BadTranscript(GatewayError):
    pass


class EmptyBatch(GatewayError):
    pass


class ContextWindowWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    model_id: str
    api_key: str | None = None
    temperature: float = 0.0
    max_tokens: int = 4096
    context_window: int = 8192
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if not self.base_url:
            raise GatewayError("base_url must be nonempty")
        if not self.model_id:
            raise GatewayError("model_id must be nonempty")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_tokens < 1 or self.context_window < 1:
            raise GatewayError("token limits must be positive")
        if self.timeout <= 0:
            raise GatewayError("timeout must be positive")
        if self.max_retries < 0:
            raise GatewayError("max_retries must be >= 0")
        if self.context_window < 2048:
            # small local-server defaults are a known silent quality killer
            warnings.warn(
                f"context_window={self.context_window} is below 2048; "
                "generation quality degrades sharply with truncated prompts",
                ContextWindowWarning,
                stacklevel=2,
            )


@dataclass(frozen=True)
class ChatExchange:
    request_messages: tuple[tuple[str, str], ...]
    response: RawResponse
    usage: dict | None = None


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str


def load_api_key(
    env_var: str = DEFAULT_API_KEY_ENV, credentials_path: str | None = None
) -> str | None:
    """First match wins: environment variable, then the credentials file."""
    value = os.environ.get(env_var)
    if value and value.strip():
        return value.strip()
    path = Path(
        credentials_path
        or os.path.join(os.path.expanduser("~"), ".config", "dsm-forge", "credentials")
    )
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        return None
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            return line
    return None


def estimate_tokens(messages) -> int:
    """Cheap chars/4 heuristic; good enough to flag truncation risk."""
    return sum(len(content) for _, content in messages) // 4


def warn_if_context_exceeded(cfg: BackendConfig, messages) -> None:
    estimate = estimate_tokens(messages)
    if estimate > cfg.context_window:
        warnings.warn(
            f"prompt estimate {estimate} tokens exceeds context_window "
            f"{cfg.context_window}; the server will truncate silently",
            ContextWindowWarning,
            stacklevel=3,
        )


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_messages(messages) -> tuple[tuple[str, str], ...]:
    messages = tuple((str(r), str(c)) for r, c in messages)
    if not messages:
        raise EmptyBatch("messages must be nonempty")
    return messages


class Backend:
    """Interface: ``chat_exchange`` is the one method backends implement."""

    def chat_exchange(self, messages) -> ChatExchange:
        raise NotImplementedError

    def chat(self, messages) -> RawResponse:
        return self.chat_exchange(messages).response

    def embed(self, texts) -> list[EmbeddingVector]:
        raise NotImplementedError


_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def mock_embed(texts, model_id: str = "mock-embed", dim: int = EMBED_DIM) -> list[EmbeddingVector]:
    """Hashed token-bag embedding: deterministic, order-insensitive, offline.

    Lowercase, split on non-alphanumerics, hash each token into one of
    ``dim`` buckets, count.  Identical token bags embed identically, which
    is what the alignment tests lean on.
    """
    texts = list(texts)
    if not texts or any(not t for t in texts):
        raise EmptyBatch("embed needs a nonempty list of nonempty texts")
    vectors = []
    for text in texts:
        counts = [0.0] * dim
        for token in _TOKEN_SPLIT.split(text.lower()):
            if token:
                bucket = int.from_bytes(
                    hashlib.sha256(token.encode("utf-8")).digest()[:8], "big"
                ) % dim
                counts[bucket] += 1.0
        vectors.append(EmbeddingVector(values=tuple(counts), model_id=model_id))
    return vectors


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if len(a.values) != len(b.values):
        raise GatewayError(
            f"dimension mismatch: {len(a.values)} vs {len(b.values)}"
        )
    dot = sum(x * y for x, y in zip(a.values, b.values))
    na = math.sqrt(sum(x * x for x in a.values))
    nb = math.sqrt(sum(y * y for y in b.values))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


class MockBackend(Backend):
    """Offline backend driven by a pure responder function.

    The responder maps the message list to the assistant text, so identical
    requests always get identical responses no matter the interleaving.
    Timestamps are pinned to the epoch to keep recorded transcripts
    byte-stable.
    """

    def __init__(self, responder, model_id: str = "mock"):
        self._responder = responder
        self.model_id = model_id

    def chat_exchange(self, messages) -> ChatExchange:
        messages = _check_messages(messages)
        text = self._responder(messages)
        response = RawResponse(
            text=text, model_id=self.model_id, timestamp=MOCK_TIMESTAMP
        )
        return ChatExchange(request_messages=messages, response=response, usage=None)

    def embed(self, texts) -> list[EmbeddingVector]:
        return mock_embed(texts)


class ReplayBackend(Backend):
    """Serves a recorded transcript by call position."""

    def __init__(self, exchanges):
        exchanges = list(exchanges)
        if not exchanges:
            raise BadTranscript("transcript is empty")
        self._exchanges = exchanges
        self._cursor = 0
        self._lock = threading.Lock()

    def chat_exchange(self, messages) -> ChatExchange:
        messages = _check_messages(messages)
        with self._lock:
            if self._cursor >= len(self._exchanges):
                raise TranscriptExhausted(
                    f"transcript has only {len(self._exchanges)} exchanges"
                )
            recorded = self._exchanges[self._cursor]
            self._cursor += 1
        return ChatExchange(
            request_messages=messages, response=recorded.response, usage=recorded.usage
        )

    def embed(self, texts) -> list[EmbeddingVector]:
        # embeddings are locally deterministic, so they are not transcribed
        return mock_embed(texts)

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._exchanges) - self._cursor


class HttpBackend(Backend):
    """OpenAI-compatible HTTP client with exponential-backoff retries."""

    def __init__(self, cfg: BackendConfig, session=None, sleeper=None):
        self.cfg = cfg
        self._session = session or requests.Session()
        self._sleeper = sleeper or __import__("time").sleep

    def _post(self, path: str, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + path
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        last_error: GatewayError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt > 0:
                self._sleeper(0.5 * 2 ** (attempt - 1))
            try:
                reply = self._session.post(
                    url, json=payload, headers=headers, timeout=self.cfg.timeout
                )
            except requests.Timeout as exc:
                last_error = Timeout(str(exc))
                continue
            except requests.RequestException as exc:
                last_error = Transport(str(exc))
                continue
            if reply.status_code == 429:
                last_error = RateLimited(reply.text[:200])
                continue
            if 500 <= reply.status_code < 600:
                last_error = HttpStatus(reply.status_code, reply.text[:200])
                continue
            if reply.status_code != 200:
                raise HttpStatus(reply.status_code, reply.text[:200])
            try:
                return reply.json()
            except ValueError as exc:
                raise MalformedServerReply(f"non-JSON body: {exc}") from exc
        assert last_error is not None
        raise last_error

    def chat_exchange(self, messages) -> ChatExchange:
        messages = _check_messages(messages)
        warn_if_context_exceeded(self.cfg, messages)
        payload = {
            "model": self.cfg.model_id,
            "messages": [{"role": r, "content": c} for r, c in messages],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }
        body = self._post("/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedServerReply(f"unexpected chat reply shape: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedServerReply("assistant content is not a string")
        response = RawResponse(
            text=text,
            model_id=str(body.get("model", self.cfg.model_id)),
            timestamp=_utc_now(),
        )
        usage = body.get("usage") if isinstance(body.get("usage"), dict) else None
        return ChatExchange(request_messages=messages, response=response, usage=usage)

    def embed(self, texts) -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts or any(not t for t in texts):
            raise EmptyBatch("embed needs a nonempty list of nonempty texts")
        payload = {"model": self.cfg.model_id, "input": texts}
        body = self._post("/embeddings", payload)
        try:
            rows = sorted(body["data"], key=lambda row: row["index"])
            vectors = [
                EmbeddingVector(
                    values=tuple(float(x) for x in row["embedding"]),
                    model_id=self.cfg.model_id,
                )
                for row in rows
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedServerReply(f"unexpected embeddings shape: {exc}") from exc
        if len(vectors) != len(texts):
            raise MalformedServerReply(
                f"{len(vectors)} vectors for {len(texts)} inputs"
            )
        dims = {len(v.values) for v in vectors}
        if len(dims) > 1:
            raise MalformedServerReply(f"mixed embedding dimensions {sorted(dims)}")
        return vectors


@dataclass
class TranscriptRecorder:
    """Append-only exchange log; safe for concurrent writers."""

    exchanges: list[ChatExchange] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def append(self, exchange: ChatExchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)

    def extend(self, exchanges) -> None:
        with self._lock:
            self.exchanges.extend(exchanges)

    def __len__(self) -> int:
        with self._lock:
            return len(self.exchanges)


class RecordingBackend(Backend):
    """Pass-through wrapper that logs every chat exchange."""

    def __init__(self, inner: Backend, recorder: TranscriptRecorder):
        self.inner = inner
        self.recorder = recorder

    def chat_exchange(self, messages) -> ChatExchange:
        exchange = self.inner.chat_exchange(messages)
        self.recorder.append(exchange)
        return exchange

    def embed(self, texts) -> list[EmbeddingVector]:
        return self.inner.embed(texts)


def exchange_to_dict(exchange: ChatExchange) -> dict:
    return {
        "request_messages": [[r, c] for r, c in exchange.request_messages],
        "response": {
            "text": exchange.response.text,
            "model_id": exchange.response.model_id,
            "timestamp": exchange.response.timestamp,
        },
        "usage": exchange.usage,
    }


def exchange_from_dict(obj: dict) -> ChatExchange:
    try:
        messages = tuple((str(r), str(c)) for r, c in obj["request_messages"])
        response = RawResponse(
            text=obj["response"]["text"],
            model_id=obj["response"]["model_id"],
            timestamp=obj["response"]["timestamp"],
        )
        usage = obj.get("usage")
    except (KeyError, TypeError, ValueError) as exc:
        raise BadTranscript(f"malformed exchange record: {exc}") from exc
    if usage is not None and not isinstance(usage, dict):
        raise BadTranscript("usage must be an object or null")
    return ChatExchange(request_messages=messages, response=response, usage=usage)


def save_transcript(path, exchanges) -> None:
    lines = [json.dumps(exchange_to_dict(e), ensure_ascii=False) for e in exchanges]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_transcript(path) -> list[ChatExchange]:
    exchanges = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BadTranscript(f"line {lineno}: invalid JSON: {exc}") from exc
        exchanges.append(exchange_from_dict(obj))
    return exchanges
