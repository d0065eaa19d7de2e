"""Exact top-k cosine retrieval over chunk embeddings.

Index file layout (all integers little-endian)::

    magic      7 bytes   b"CWUIDX1"
    version    u16       FORMAT_VERSION
    dim        u32
    count      u32
    tokenizer  u16 length + UTF-8 name, u16 length + UTF-8 version
    entries    count x (u16 length + UTF-8 doc_id, u32 chunk_index,
                        u32 token_count, u8 normalized, dim x f64 values)
    crc32      u32       over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ragcwu.embedding import EmbeddingVector, l2_norm
from ragcwu.errors import IndexBuildError, IndexLoadError, InvalidParameterError
from ragcwu.tokenization import DEFAULT_TOKENIZER, TokenizerSpec

MAGIC = b"CWUIDX1"
FORMAT_VERSION = 1

ChunkRef = tuple[str, int]


@dataclass(frozen=True)
class IndexEntry:
    chunk_ref: ChunkRef
    vector: EmbeddingVector
    token_count: int


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[tuple[ChunkRef, float], ...]

    @property
    def refs(self) -> list[ChunkRef]:
        return [ref for ref, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


class VectorIndex:
    """Immutable exact-search index. Ties rank in insertion order."""

    def __init__(
        self,
        entries: Sequence[IndexEntry],
        dim: int | None,
        tokenizer_spec: TokenizerSpec = DEFAULT_TOKENIZER.spec,
    ) -> None:
        self._entries = tuple(entries)
        self.dim = dim
        self.tokenizer_spec = tokenizer_spec
        if self._entries:
            matrix = np.vstack([e.vector.values for e in self._entries])
        else:
            matrix = np.zeros((0, dim or 0))
        matrix.setflags(write=False)
        self._matrix = matrix
        self._norms = np.sqrt((matrix * matrix).sum(axis=1))

    @property
    def entries(self) -> tuple[IndexEntry, ...]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def scores(self, query_vec: EmbeddingVector) -> np.ndarray:
        if self.dim is not None and query_vec.dim != self.dim:
            raise InvalidParameterError(f"query dim {query_vec.dim} != index dim {self.dim}")
        qnorm = l2_norm(query_vec.values)
        dots = (self._matrix * query_vec.values).sum(axis=1)
        denom = self._norms * qnorm
        out = np.zeros(len(self._entries))
        nz = denom != 0.0
        out[nz] = dots[nz] / denom[nz]
        return np.clip(out, -1.0, 1.0)

    def query_top_k(self, query_vec: EmbeddingVector, k: int) -> RetrievalResult:
        if k < 1:
            raise InvalidParameterError(f"k must be >= 1, got {k}")
        if not self._entries:
            return RetrievalResult(())
        scores = self.scores(query_vec)
        # stable sort keeps insertion order among equal scores
        order = np.argsort(-scores, kind="stable")[:k]
        return RetrievalResult(tuple((self._entries[i].chunk_ref, float(scores[i])) for i in order))


def build_index(entries: Sequence[IndexEntry], tokenizer_spec: TokenizerSpec = DEFAULT_TOKENIZER.spec) -> VectorIndex:
    seen: set[ChunkRef] = set()
    dim = entries[0].vector.dim if entries else None
    for e in entries:
        if e.chunk_ref in seen:
            raise IndexBuildError(f"duplicate chunk_ref {e.chunk_ref}")
        seen.add(e.chunk_ref)
        if e.vector.dim != dim:
            raise IndexBuildError(f"entry {e.chunk_ref} has dim {e.vector.dim}, expected {dim}")
    return VectorIndex(entries, dim, tokenizer_spec)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def persist_index(index: VectorIndex, path: str | Path) -> None:
    dim = index.dim or 0
    parts = [
        MAGIC,
        struct.pack("<HII", FORMAT_VERSION, dim, len(index)),
        _pack_str(index.tokenizer_spec.name),
        _pack_str(index.tokenizer_spec.version),
    ]
    for e in index.entries:
        doc_id, chunk_index = e.chunk_ref
        parts.append(_pack_str(doc_id))
        parts.append(struct.pack("<IIB", chunk_index, e.token_count, int(e.vector.normalized)))
        parts.append(np.asarray(e.vector.values, dtype="<f8").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexLoadError("index file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexLoadError("index file has an invalid string") from exc


def load_index(path: str | Path) -> VectorIndex:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise IndexLoadError(f"{path}: not an index file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IndexLoadError(f"{path}: checksum mismatch, file is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, dim, count = r.unpack("<HII")
    if version != FORMAT_VERSION:
        raise IndexLoadError(f"{path}: unsupported format version {version}")
    spec = TokenizerSpec(r.string(), r.string())
    entries = []
    for _ in range(count):
        doc_id = r.string()
        chunk_index, token_count, normalized = r.unpack("<IIB")
        values = np.frombuffer(r.take(8 * dim), dtype="<f8").astype(np.float64)
        values.setflags(write=False)
        entries.append(IndexEntry((doc_id, chunk_index), EmbeddingVector(values, bool(normalized)), token_count))
    if r.pos != len(body):
        raise IndexLoadError(f"{path}: trailing bytes after entries")
    return build_index(entries, spec) if entries else VectorIndex([], dim or None, spec)
