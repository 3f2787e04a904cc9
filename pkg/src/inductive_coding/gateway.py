"""Chat and embedding access with caching, retries and bounded concurrency.

A :class:`Gateway` wraps one provider pair (chat + embeddings) behind the
contracts the pipeline relies on:

* responses are cached one file per key, written atomically;
* transient provider failures are retried with exponential backoff;
* no more than ``max_concurrency`` upstream requests are ever in flight.

Providers are plain objects with a ``chat(request)`` and/or
``embed(model_id, texts)`` method. :func:`make_providers` resolves the
``endpoint_url`` of a :class:`GatewayConfig`:

``http://`` / ``https://``
    an OpenAI-compatible server (``/chat/completions``, ``/embeddings``)
``scripted://heuristic`` / ``scripted://hash``
    the offline deterministic providers from :mod:`.scripted`
``python://package.module:factory``
    ``factory(cfg)`` returning a provider object
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .errors import ConfigurationError, IntegrityError, TransientError, TransportError
from .storage import atomic_write_text

log = logging.getLogger(__name__)

FinishReason = Literal["stop", "length", "error"]


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 512
    # retry salt: a parse retry must not be served the response it is retrying
    attempt: int = 0

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("system and user prompts must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def cache_key(self) -> str:
        parts = [self.model_id, self.system_prompt, self.user_prompt, repr(float(self.temperature))]
        if self.attempt:
            parts.append(f"attempt={self.attempt}")
        return hashlib.sha256(json.dumps(parts).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason
    cached: bool = False
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def truncated(self) -> bool:
        return self.finish_reason == "length"


@dataclass(frozen=True)
class ProviderReply:
    text: str
    finish_reason: FinishReason = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    model_id: str
    values: np.ndarray

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, model_id: str, values: Sequence[float]) -> "EmbeddingVector":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise IntegrityError("embedding must be a non-empty 1-d vector")
        norm = float(np.linalg.norm(arr))
        if not np.isfinite(norm) or norm == 0.0:
            raise IntegrityError("embedding has zero or non-finite norm")
        return cls._stored(model_id, arr / norm)

    @classmethod
    def _stored(cls, model_id: str, values) -> "EmbeddingVector":
        # already unit-normalized; renormalizing would perturb the last bits
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        return cls(model_id, arr)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dims != b.dims:
        raise IntegrityError(f"dimension mismatch: {a.dims} vs {b.dims}")
    return float(min(1.0, max(-1.0, float(np.dot(a.values, b.values)))))


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str
    model_id: str = ""
    api_key_env: str | None = None
    max_concurrency: int = 4
    max_retries: int = 3
    backoff_base_ms: int = 500
    cache_dir: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 512
    timeout_s: float = 120.0
    embed_batch_limit: int = 100

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base_ms < 1:
            raise ValueError("backoff_base_ms must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "GatewayConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gateway config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GatewayStats:
    upstream_calls: int = 0
    cache_hits: int = 0
    retries: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    peak_in_flight: int = 0
    embed_upstream_calls: int = 0
    embed_cache_hits: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class _FileCache:
    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None

    def _path(self, kind: str, key: str) -> Path:
        assert self.root is not None
        return self.root / kind / key[:2] / f"{key}.json"

    def get(self, kind: str, key: str):
        if self.root is None:
            return None
        path = self._path(kind, key)
        try:
            with path.open(encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            log.warning("ignoring unreadable cache entry %s", path)
            return None

    def put(self, kind: str, key: str, value) -> None:
        if self.root is None:
            return
        atomic_write_text(self._path(kind, key), json.dumps(value, sort_keys=True))


class Gateway:
    """Shared access point for one chat model and/or one embedding model."""

    def __init__(
        self,
        cfg: GatewayConfig,
        chat_provider=None,
        embed_provider=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if chat_provider is None and embed_provider is None:
            chat_provider, embed_provider = make_providers(cfg)
        self.cfg = cfg
        self.chat_provider = chat_provider
        self.embed_provider = embed_provider
        self.stats = GatewayStats()
        self._sleep = sleep
        self._cache = _FileCache(cfg.cache_dir)
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self._lock = threading.Lock()
        self._in_flight = 0

    # -- plumbing -----------------------------------------------------------

    def _call_upstream(self, fn, what: str):
        attempts = 0
        while True:
            attempts += 1
            with self._slots:
                with self._lock:
                    self._in_flight += 1
                    self.stats.peak_in_flight = max(self.stats.peak_in_flight, self._in_flight)
                try:
                    return fn()
                except TransientError as exc:
                    error = exc
                finally:
                    with self._lock:
                        self._in_flight -= 1
            if attempts > self.cfg.max_retries:
                raise TransportError(f"{what} failed: {error}", attempts) from error
            with self._lock:
                self.stats.retries += 1
            delay = self.cfg.backoff_base_ms * (2 ** (attempts - 1)) / 1000.0
            log.info("%s transient failure (%s); retry %d in %.2fs", what, error, attempts, delay)
            self._sleep(delay)

    # -- chat -----------------------------------------------------------------

    def request(self, system_prompt: str, user_prompt: str, attempt: int = 0) -> ChatRequest:
        """Build a request carrying this gateway's model and sampling settings."""
        return ChatRequest(
            model_id=self.cfg.model_id,
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=self.cfg.temperature,
            max_output_tokens=self.cfg.max_output_tokens,
            attempt=attempt,
        )

    def complete(self, req: ChatRequest) -> ChatResponse:
        if self.chat_provider is None:
            raise ConfigurationError("gateway has no chat provider")
        if not req.model_id:
            req = replace(req, model_id=self.cfg.model_id)
        key = req.cache_key()
        hit = self._cache.get("chat", key)
        if hit is not None:
            with self._lock:
                self.stats.cache_hits += 1
                self.stats.prompt_tokens += hit.get("prompt_tokens", 0)
                self.stats.completion_tokens += hit.get("completion_tokens", 0)
            return ChatResponse(
                hit["text"],
                hit["finish_reason"],
                cached=True,
                prompt_tokens=hit.get("prompt_tokens", 0),
                completion_tokens=hit.get("completion_tokens", 0),
            )

        reply: ProviderReply = self._call_upstream(lambda: self.chat_provider.chat(req), "chat")
        with self._lock:
            self.stats.upstream_calls += 1
            self.stats.prompt_tokens += reply.prompt_tokens
            self.stats.completion_tokens += reply.completion_tokens
        if reply.finish_reason == "length":
            log.warning("response truncated at max_output_tokens=%d", req.max_output_tokens)
        if reply.finish_reason != "error":
            self._cache.put(
                "chat",
                key,
                {
                    "text": reply.text,
                    "finish_reason": reply.finish_reason,
                    "prompt_tokens": reply.prompt_tokens,
                    "completion_tokens": reply.completion_tokens,
                },
            )
        return ChatResponse(
            reply.text,
            reply.finish_reason,
            cached=False,
            prompt_tokens=reply.prompt_tokens,
            completion_tokens=reply.completion_tokens,
        )

    # -- embeddings -----------------------------------------------------------

    def _embed_key(self, text: str) -> str:
        return hashlib.sha256(json.dumps([self.cfg.model_id, text]).encode("utf-8")).hexdigest()

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Embed ``texts`` preserving order; vectors come back unit-normalized."""
        if not texts:
            raise ValueError("texts must be non-empty")
        if self.embed_provider is None:
            raise ConfigurationError("gateway has no embedding provider")
        model = self.cfg.model_id
        out: list[EmbeddingVector | None] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, text in enumerate(texts):
            hit = self._cache.get("embed", self._embed_key(text))
            if hit is not None:
                out[i] = EmbeddingVector._stored(model, hit)
                with self._lock:
                    self.stats.embed_cache_hits += 1
            else:
                missing.setdefault(text, []).append(i)

        todo = list(missing)
        limit = max(1, int(getattr(self.embed_provider, "batch_limit", self.cfg.embed_batch_limit)))
        for start in range(0, len(todo), limit):
            chunk = todo[start : start + limit]
            raw = self._call_upstream(lambda: self.embed_provider.embed(model, chunk), "embed")
            with self._lock:
                self.stats.embed_upstream_calls += 1
            if len(raw) != len(chunk):
                raise IntegrityError(f"provider returned {len(raw)} vectors for {len(chunk)} texts")
            vecs = [EmbeddingVector.from_raw(model, values) for values in raw]
            dims = {v.dims for v in vecs} | {v.dims for v in out if v is not None}
            if len(dims) != 1:
                raise IntegrityError(f"embedding dimensions differ within batch: {sorted(dims)}")
            for text, vec in zip(chunk, vecs):
                self._cache.put("embed", self._embed_key(text), vec.values.tolist())
                for i in missing[text]:
                    out[i] = vec

        dims = {v.dims for v in out}
        if len(dims) != 1:
            raise IntegrityError(f"embedding dimensions differ within batch: {sorted(dims)}")
        return out  # type: ignore[return-value]


# -- providers ------------------------------------------------------------------


class OpenAICompatibleProvider:
    """Chat-completions and embeddings over the OpenAI HTTP wire format."""

    def __init__(self, cfg: GatewayConfig, client=None):
        import httpx

        api_key = None
        if cfg.api_key_env:
            api_key = os.environ.get(cfg.api_key_env)
            if not api_key:
                raise ConfigurationError(f"environment variable {cfg.api_key_env} is not set")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base = cfg.endpoint_url.rstrip("/")
        self.batch_limit = cfg.embed_batch_limit
        self._httpx = httpx
        self.client = client or httpx.Client(timeout=cfg.timeout_s, headers=headers)
        if client is not None and headers:
            self.client.headers.update(headers)

    def _post(self, path: str, payload: dict) -> dict:
        httpx = self._httpx
        try:
            resp = self.client.post(f"{self.base}{path}", json=payload)
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigurationError(f"HTTP {resp.status_code}: {resp.text[:300]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransientError("malformed JSON body from provider") from exc

    def chat(self, req: ChatRequest) -> ProviderReply:
        body = self._post(
            "/chat/completions",
            {
                "model": req.model_id,
                "messages": [
                    {"role": "system", "content": req.system_prompt},
                    {"role": "user", "content": req.user_prompt},
                ],
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
            },
        )
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransientError("response missing choices[0].message.content") from exc
        reason = choice.get("finish_reason") or "stop"
        if reason not in ("stop", "length"):
            reason = "error"
        usage = body.get("usage") or {}
        return ProviderReply(
            text,
            reason,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]:
        body = self._post("/embeddings", {"model": model_id, "input": list(texts)})
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            return [d["embedding"] for d in data]
        except (KeyError, TypeError) as exc:
            raise TransientError("response missing data[].embedding") from exc


def make_providers(cfg: GatewayConfig):
    """Return ``(chat_provider, embed_provider)`` for ``cfg.endpoint_url``."""
    url = cfg.endpoint_url
    if url.startswith(("http://", "https://")):
        if not cfg.model_id:
            raise ConfigurationError("model_id is required for HTTP endpoints")
        p = OpenAICompatibleProvider(cfg)
        return p, p
    if url.startswith("scripted://"):
        from . import scripted

        name = url[len("scripted://") :]
        if name == "heuristic":
            return scripted.HeuristicChatModel(), scripted.HashEmbedder()
        if name == "hash":
            return None, scripted.HashEmbedder()
        raise ConfigurationError(f"unknown scripted provider {name!r}")
    if url.startswith("python://"):
        target = url[len("python://") :]
        mod_name, _, attr = target.partition(":")
        if not attr:
            raise ConfigurationError("python:// endpoints must be 'module:factory'")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot load provider factory {target!r}: {exc}") from exc
        provider = factory(cfg)
        chat = provider if hasattr(provider, "chat") else None
        embed = provider if hasattr(provider, "embed") else None
        return chat, embed
    raise ConfigurationError(f"unsupported endpoint_url {url!r}")
