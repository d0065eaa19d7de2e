"""Embedding providers and cosine similarity.

Two providers share the ``embed_batch`` interface: ``RemoteEmbedder`` talks
to an OpenAI-style ``/embeddings`` endpoint, and ``HashingEmbedder`` is a
deterministic signed feature-hashing bag of tokens that needs no network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Protocol, Sequence

import httpx
import numpy as np

from ragcwu._http import auth_headers, post_json
from ragcwu.errors import InvalidParameterError, ProviderError
from ragcwu.tokenization import DEFAULT_TOKENIZER, Tokenizer

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool

    @property
    def dim(self) -> int:
        return len(self.values)

    @classmethod
    def from_raw(cls, raw: Sequence[float] | np.ndarray) -> EmbeddingVector:
        """L2-normalise ``raw``; the zero vector passes through unnormalised."""
        values = np.array(raw, dtype=np.float64)
        norm = l2_norm(values)
        if norm == 0.0:
            values.setflags(write=False)
            return cls(values, normalized=False)
        values = values / norm
        values.setflags(write=False)
        return cls(values, normalized=True)

    def tolist(self) -> list[float]:
        return self.values.tolist()


def l2_norm(values: np.ndarray) -> float:
    return math.sqrt(float((values * values).sum()))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1].

    Zero-norm inputs give 0.0 rather than an error.
    """
    if a.dim != b.dim:
        raise InvalidParameterError(f"dimension mismatch: {a.dim} != {b.dim}")
    na, nb = l2_norm(a.values), l2_norm(b.values)
    if na == 0.0 or nb == 0.0:
        return 0.0
    s = float((a.values * b.values).sum()) / (na * nb)
    return min(1.0, max(-1.0, s))


class EmbeddingProvider(Protocol):
    dim: int | None

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


@lru_cache(maxsize=1 << 16)
def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


class HashingEmbedder:
    """Signed feature hashing of lowercased tokens into ``dim`` buckets.

    Each token is hashed with 64-bit FNV-1a; the bucket is ``h % dim`` and the
    sign is -1 when the top bit of ``h`` is set. The accumulated vector is
    L2-normalised.
    """

    kind = "hashing"

    def __init__(self, dim: int = 256, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> None:
        if dim < 8:
            raise InvalidParameterError(f"dim must be >= 8, got {dim}")
        self.dim = dim
        self.tokenizer = tokenizer

    def bucket_and_sign(self, token: str) -> tuple[int, int]:
        h = fnv1a_64(token.lower().encode("utf-8"))
        return h % self.dim, -1 if h >> 63 else 1

    def embed(self, text: str) -> EmbeddingVector:
        values = np.zeros(self.dim)
        for tok in self.tokenizer.tokenize(text):
            bucket, sign = self.bucket_and_sign(tok.text)
            values[bucket] += sign
        return EmbeddingVector.from_raw(values)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise InvalidParameterError("embed_batch needs at least one text")
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Client for ``POST {endpoint_url}/embeddings`` (OpenAI wire format)."""

    kind = "remote"

    def __init__(
        self,
        endpoint_url: str,
        model_name: str,
        batch_size: int = 32,
        api_key_env: str = "CWU_API_KEY",
        max_retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        max_input_tokens: int | None = None,
        client: httpx.Client | None = None,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ) -> None:
        if batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {batch_size}")
        self.url = endpoint_url.rstrip("/") + "/embeddings"
        self.model_name = model_name
        self.batch_size = batch_size
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_input_tokens = max_input_tokens
        self.tokenizer = tokenizer
        self.client = client or httpx.Client(timeout=timeout)
        self.dim: int | None = None

    def _request(self, texts: Sequence[str]) -> list[list[float]]:
        body = post_json(
            self.client,
            self.url,
            {"model": self.model_name, "input": list(texts)},
            auth_headers(self.api_key_env),
            max_retries=self.max_retries,
            backoff=self.backoff,
        )
        try:
            data = sorted(body["data"], key=lambda item: item["index"])
            vectors = [item["embedding"] for item in data]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc!r}") from exc
        if len(vectors) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise InvalidParameterError("embed_batch needs at least one text")
        if self.max_input_tokens is not None:
            for i, t in enumerate(texts):
                n = self.tokenizer.count(t)
                if n > self.max_input_tokens:
                    raise InvalidParameterError(
                        f"text {i} has {n} tokens, above max_input_tokens={self.max_input_tokens}"
                    )
        out: list[EmbeddingVector] = []
        for lo in range(0, len(texts), self.batch_size):
            for raw in self._request(texts[lo : lo + self.batch_size]):
                if self.dim is None:
                    self.dim = len(raw)
                elif len(raw) != self.dim:
                    raise ProviderError(f"embedding dim changed from {self.dim} to {len(raw)}")
                out.append(EmbeddingVector.from_raw(raw))
        return out


@dataclass
class EmbeddingProviderConfig:
    kind: Literal["remote", "hashing"] = "hashing"
    endpoint_url: str | None = None
    model_name: str | None = None
    dim: int = 256
    batch_size: int = 32
    api_key_env: str = "CWU_API_KEY"
    max_retries: int = 3
    max_input_tokens: int | None = None

    def validate(self) -> None:
        if self.kind not in ("remote", "hashing"):
            raise InvalidParameterError(f"unknown embedder kind {self.kind!r}")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.dim < 8:
            raise InvalidParameterError("dim must be >= 8")
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise InvalidParameterError("remote embedder needs endpoint_url and model_name")


def make_embedder(config: EmbeddingProviderConfig) -> EmbeddingProvider:
    config.validate()
    if config.kind == "hashing":
        return HashingEmbedder(config.dim)
    assert config.endpoint_url and config.model_name
    return RemoteEmbedder(
        config.endpoint_url,
        config.model_name,
        batch_size=config.batch_size,
        api_key_env=config.api_key_env,
        max_retries=config.max_retries,
        max_input_tokens=config.max_input_tokens,
    )
