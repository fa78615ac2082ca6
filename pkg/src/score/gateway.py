"""Uniform access to completion, embedding, and sentiment backends.

Two backends: `remote` speaks the OpenAI-compatible chat-completions and
embeddings wire format over HTTP; `mock` is fully deterministic and
offline (hashed bag-of-words embeddings, lexicon sentiment, hash-derived
completions) so the whole pipeline can run and be tested without a model.

A content-addressed cache sits in front of both backends. In `record`
mode every response is written through; in `replay` mode requests are
served from the cache only and a miss is an error, which makes a replay
run a pure function of (inputs, config, cache).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import lexicon
from .errors import (
    ContractError,
    SentimentError,
    TransportError,
    UncachedRequestError,
    ValidationError,
)
from .jsonio import atomic_write, canonical_dumps

logger = logging.getLogger(__name__)

API_KEY_ENV = "SCORE_API_KEY"

_BACKENDS = ("remote", "mock")
_CACHE_MODES = ("off", "record", "replay")

_INITIAL_BACKOFF = 0.5
_BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class GatewayConfig:
    backend: str = "mock"
    base_url: str = ""
    model_name: str = "mock-small"
    embed_model_name: str = ""  # empty -> model_name
    embed_dim: int = 256
    max_parallel: int = 4
    timeout: float = 30.0
    max_retries: int = 3
    cache_mode: str = "off"
    embed_batch_limit: int = 256

    def __post_init__(self):
        if self.backend not in _BACKENDS:
            raise ValidationError("backend", f"must be one of {_BACKENDS}, got {self.backend!r}")
        if self.cache_mode not in _CACHE_MODES:
            raise ValidationError("cache_mode", f"must be one of {_CACHE_MODES}, got {self.cache_mode!r}")
        if self.backend == "remote" and not self.base_url:
            raise ValidationError("base_url", "required for the remote backend")
        if self.embed_dim <= 0:
            raise ValidationError("embed_dim", "must be positive")
        if self.max_parallel <= 0:
            raise ValidationError("max_parallel", "must be positive")
        if self.max_retries < 0:
            raise ValidationError("max_retries", "must be >= 0")
        if self.embed_batch_limit <= 0:
            raise ValidationError("embed_batch_limit", "must be positive")

    @property
    def effective_embed_model(self) -> str:
        return self.embed_model_name or self.model_name

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "embed_model_name": self.embed_model_name,
            "embed_dim": self.embed_dim,
            "max_parallel": self.max_parallel,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "cache_mode": self.cache_mode,
            "embed_batch_limit": self.embed_batch_limit,
        }


@dataclass(frozen=True)
class SentimentScore:
    """Emotional-tone score in [0, 1]."""

    value: float

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValidationError("value", f"must be in [0, 1], got {self.value}")


@dataclass
class GatewayStats:
    """Counters for tests and logging; guarded by the gateway's lock."""

    transport_calls: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    in_flight: int = 0
    max_in_flight: int = 0


def default_transport(url: str, body: dict, timeout: float, headers: dict) -> dict:
    """POST JSON and return the decoded JSON reply; raises TransportError."""
    import requests

    try:
        response = requests.post(url, json=body, timeout=timeout, headers=headers)
    except requests.RequestException as e:
        raise TransportError(f"POST {url} failed: {e}") from e
    if response.status_code != 200:
        raise TransportError(f"POST {url} returned HTTP {response.status_code}: {response.text[:200]}")
    try:
        return response.json()
    except ValueError as e:
        raise TransportError(f"POST {url} returned non-JSON body") from e


class LlmGateway:
    """Thread-safe front end over one configured backend plus the cache."""

    def __init__(
        self,
        config: GatewayConfig,
        cache_dir: Path | str | None = None,
        transport: Callable[[str, dict, float, dict], dict] | None = None,
    ):
        if config.cache_mode != "off" and cache_dir is None:
            raise ContractError(f"cache_mode={config.cache_mode!r} requires a cache_dir")
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.stats = GatewayStats()
        self._transport = transport or default_transport
        self._sleep = time.sleep  # patched in tests to avoid real backoff waits
        self._semaphore = threading.BoundedSemaphore(config.max_parallel)
        self._lock = threading.Lock()

    @property
    def is_mock(self) -> bool:
        return self.config.backend == "mock"

    # -- public operations ---------------------------------------------------

    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        if not prompt:
            raise ContractError("prompt must be non-empty")
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        return self._cached("complete", self.config.model_name, body, lambda: self._complete_uncached(body))

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            return []
        for i, text in enumerate(texts):
            if not text:
                raise ContractError(f"texts[{i}] must be non-empty")
        if len(texts) > self.config.embed_batch_limit:
            out: list[np.ndarray] = []
            limit = self.config.embed_batch_limit
            for start in range(0, len(texts), limit):
                out.extend(self.embed(texts[start : start + limit]))
            return out
        body = {"model": self.config.effective_embed_model, "input": list(texts)}
        rows = self._cached("embed", self.config.effective_embed_model, body, lambda: self._embed_uncached(body))
        vectors = [np.asarray(row, dtype=np.float64) for row in rows]
        for i, vec in enumerate(vectors):
            if vec.shape != (self.config.embed_dim,):
                raise TransportError(
                    f"embedding {i} has dimension {vec.shape}, expected ({self.config.embed_dim},)"
                )
        return vectors

    def score_sentiment(self, text: str) -> SentimentScore:
        if not text:
            raise ContractError("text must be non-empty")
        body = {"model": self.config.model_name, "text": text}
        value = self._cached("sentiment", self.config.model_name, body, lambda: self._sentiment_uncached(text))
        return SentimentScore(value=float(value))

    # -- backend dispatch ------------------------------------------------------

    def _complete_uncached(self, body: dict) -> str:
        if self.is_mock:
            digest = hashlib.sha256(body["messages"][0]["content"].encode("utf-8")).hexdigest()
            return f"[mock:{digest[:16]}]"
        reply = self._post("/chat/completions", body)
        try:
            content = reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise TransportError(f"malformed chat reply: {reply!r:.200}") from e
        if not isinstance(content, str):
            raise TransportError("chat reply content is not a string")
        return content

    def _embed_uncached(self, body: dict) -> list[list[float]]:
        if self.is_mock:
            return [hashed_embedding(text, self.config.embed_dim).tolist() for text in body["input"]]
        reply = self._post("/embeddings", body)
        try:
            data = sorted(reply["data"], key=lambda d: d["index"])
            return [d["embedding"] for d in data]
        except (KeyError, TypeError) as e:
            raise TransportError(f"malformed embeddings reply: {reply!r:.200}") from e

    def _sentiment_uncached(self, text: str) -> float:
        if self.is_mock:
            return lexicon.mock_sentiment_value(text)
        from . import prompts

        prompt = prompts.render(prompts.load("sentiment"), text=text)
        reply = self._complete_uncached(
            {
                "model": self.config.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0.0,
                "max_tokens": 8,
            }
        )
        value = _parse_decimal(reply)
        if value is None:
            retry = prompt + "\nReply with ONLY one decimal number between 0 and 1. No other text."
            reply = self._complete_uncached(
                {
                    "model": self.config.model_name,
                    "messages": [{"role": "user", "content": retry}],
                    "temperature": 0.0,
                    "max_tokens": 8,
                }
            )
            value = _parse_decimal(reply)
            if value is None:
                raise SentimentError("sentiment reply is not a decimal", raw_reply=reply)
        if value < 0.0 or value > 1.0:
            logger.warning("sentiment reply %s out of range; clamped", value)
            value = min(1.0, max(0.0, value))
        return value

    # -- transport with retry and the parallelism bound ----------------------

    def _post(self, endpoint: str, body: dict) -> dict:
        url = self.config.base_url.rstrip("/") + endpoint
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(_INITIAL_BACKOFF * _BACKOFF_FACTOR ** (attempt - 1))
            try:
                with self._semaphore:
                    with self._lock:
                        self.stats.transport_calls += 1
                        self.stats.in_flight += 1
                        self.stats.max_in_flight = max(self.stats.max_in_flight, self.stats.in_flight)
                    try:
                        return self._transport(url, body, self.config.timeout, headers)
                    finally:
                        with self._lock:
                            self.stats.in_flight -= 1
            except TransportError as e:
                last_error = e
                logger.warning("transport attempt %d/%d failed: %s", attempt + 1, self.config.max_retries + 1, e)
        raise TransportError(
            f"{endpoint} failed after {self.config.max_retries + 1} attempts: {last_error}"
        ) from last_error

    # -- cache -----------------------------------------------------------------

    def _cached(self, op: str, model: str, body: dict, compute: Callable[[], Any]) -> Any:
        mode = self.config.cache_mode
        if mode == "off":
            return compute()
        key = request_digest(op, model, body)
        path = self.cache_dir / key[:2] / f"{key}.json"
        if path.exists():
            with self._lock:
                self.stats.cache_hits += 1
            return json.loads(path.read_text("utf-8"))["response"]
        if mode == "replay":
            raise UncachedRequestError(f"uncached request: op={op} key={key}")
        with self._lock:
            self.stats.cache_misses += 1
        response = compute()
        record = {"op": op, "model": model, "request": body, "response": response}
        atomic_write(path, (canonical_dumps(record, indent=2) + "\n").encode("utf-8"))
        return response


def request_digest(op: str, model: str, body: dict) -> str:
    """Content hash identifying one request across machines and runs."""
    payload = f"{op}\n{model}\n{canonical_dumps(body)}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Mock embedding: signed feature hashing over unigrams + bigrams
# ---------------------------------------------------------------------------


def hashed_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic bag-of-words embedding, unit-normalized.

    Case-folded word unigrams and bigrams are hashed into `dim` buckets
    with a hash-derived sign, which preserves lexical similarity well
    enough for retrieval tests without any model.
    """
    toks = lexicon.tokens(text)
    features = list(toks) + [f"{a} {b}" for a, b in zip(toks, toks[1:])]
    vec = np.zeros(dim, dtype=np.float64)
    for feature in features:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=9).digest()
        bucket = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] & 1 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # unreachable for any text with a word token; still, stay total
        fallback = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
        vec[fallback % dim] = 1.0
        return vec
    return vec / norm


# ---------------------------------------------------------------------------
# Reply parsing helpers shared by the structured-output callers
# ---------------------------------------------------------------------------

_DECIMAL_RE = re.compile(r"-?\d+(?:\.\d+)?")


def _parse_decimal(reply: str) -> float | None:
    match = _DECIMAL_RE.search(reply)
    return float(match.group()) if match else None


def extract_json_value(reply: str):
    """Pull the first JSON object or array out of a model reply.

    Tolerates surrounding prose and ``` fences; raises ValueError when no
    parseable JSON value is present.
    """
    text = reply.strip()
    if text.startswith("```"):
        lines = text.splitlines()
        if len(lines) >= 3:
            text = "\n".join(lines[1:-1]).strip()
    starts = [i for i in (text.find("{"), text.find("[")) if i != -1]
    if not starts:
        raise ValueError("no JSON value in reply")
    start = min(starts)
    decoder = json.JSONDecoder()
    try:
        value, _ = decoder.raw_decode(text[start:])
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid JSON in reply: {e}") from e
    return value
