"""Chunk-size x top-k grid sweep, cell aggregation and optimum selection."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from ragcwu.chunking import Chunk, Document, pack_chunks
from ragcwu.embedding import EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector, make_embedder
from ragcwu.errors import InvalidParameterError, ProviderError, SweepAborted
from ragcwu.evaluator import EvalRecord, evaluate_cell_question
from ragcwu.llm import (
    DEFAULT_TEMPLATE,
    ChatCompletionsClient,
    ChatProvider,
    GenerationOutcome,
    MockExtractiveLLM,
    ModelProfile,
    PromptTemplate,
    assemble_prompt,
    generate,
)
from ragcwu.qa_dataset import QAPair
from ragcwu.tokenization import DEFAULT_TOKENIZER
from ragcwu.vector_index import IndexEntry, RetrievalResult, VectorIndex, build_index, persist_index

log = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZES = (128, 256, 512, 1024, 2048)
DEFAULT_TOP_KS = tuple(range(1, 13))

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class SweepConfig:
    profile: ModelProfile
    chunk_sizes: tuple[int, ...] = DEFAULT_CHUNK_SIZES
    top_ks: tuple[int, ...] = DEFAULT_TOP_KS
    llm_provider: str = "remote"
    embedder: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    scorer: EmbeddingProviderConfig | None = None
    epsilon_tie: float = 0.001
    parallelism: int = 1
    seed: int = 0
    workdir: Path | None = None
    archive_prompts: bool = False
    template: PromptTemplate = DEFAULT_TEMPLATE

    def validate(self) -> None:
        for name in ("chunk_sizes", "top_ks"):
            values = tuple(getattr(self, name))
            if not values:
                raise InvalidParameterError(f"{name} must not be empty")
            if any(v < 1 for v in values):
                raise InvalidParameterError(f"{name} must be positive")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise InvalidParameterError(f"{name} must be strictly increasing: {values}")
        if self.parallelism < 1:
            raise InvalidParameterError("parallelism must be >= 1")
        if self.epsilon_tie < 0:
            raise InvalidParameterError("epsilon_tie must be >= 0")
        if self.llm_provider not in ("remote", "mock"):
            raise InvalidParameterError(f"unknown llm provider {self.llm_provider!r}")

    def snapshot(self) -> dict[str, Any]:
        return {
            "profile": asdict(self.profile),
            "chunk_sizes": list(self.chunk_sizes),
            "top_ks": list(self.top_ks),
            "llm_provider": self.llm_provider,
            "embedder": asdict(self.embedder),
            "scorer": asdict(self.scorer) if self.scorer else None,
            "epsilon_tie": self.epsilon_tie,
            "parallelism": self.parallelism,
            "seed": self.seed,
            "workdir": str(self.workdir) if self.workdir else None,
            "archive_prompts": self.archive_prompts,
            "template": asdict(self.template),
        }


@dataclass(frozen=True)
class SweepCell:
    chunk_size: int
    top_k: int
    mean_similarity: float
    mean_cwu_actual: float | None
    nominal_cwu: float
    n_ok: int
    n_overflow: int
    n_api_error: int
    mean_similarity_ok: float | None = None
    mean_cwu_all: float | None = None

    @property
    def n_total(self) -> int:
        return self.n_ok + self.n_overflow + self.n_api_error


@dataclass(frozen=True)
class OptimumReport:
    best: SweepCell
    co_optimal: tuple[SweepCell, ...]
    epsilon_tie: float
    rationale: str

    def to_json(self) -> dict[str, Any]:
        return {
            "best": {
                "chunk_size": self.best.chunk_size,
                "top_k": self.best.top_k,
                "mean_similarity": self.best.mean_similarity,
                "mean_cwu_actual": self.best.mean_cwu_actual,
            },
            "co_optimal": [asdict(c) for c in self.co_optimal],
            "epsilon_tie": self.epsilon_tie,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class TopKSummary:
    top_k: int
    best_mean_similarity: float
    best_chunk_size: int
    mean_cwu_actual: float | None


@dataclass
class SweepResult:
    config: dict[str, Any]
    cells: list[SweepCell]
    records: list[EvalRecord]
    optimum: OptimumReport
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def chunk_sizes(self) -> list[int]:
        return sorted({c.chunk_size for c in self.cells})

    @property
    def top_ks(self) -> list[int]:
        return sorted({c.top_k for c in self.cells})

    def cell(self, chunk_size: int, top_k: int) -> SweepCell:
        for c in self.cells:
            if c.chunk_size == chunk_size and c.top_k == top_k:
                return c
        raise KeyError((chunk_size, top_k))


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate_cells(
    records: Iterable[EvalRecord],
    chunk_sizes: Sequence[int],
    top_ks: Sequence[int],
    context_length: int,
) -> list[SweepCell]:
    """Arithmetic-mean aggregation of records into one cell per grid point.

    ``mean_similarity`` includes sentinel records; ``mean_similarity_ok`` and
    ``mean_cwu_actual`` use only ``ok`` records.
    """
    by_cell: dict[tuple[int, int], list[EvalRecord]] = {(c, k): [] for c in chunk_sizes for k in top_ks}
    for r in records:
        by_cell[(r.chunk_size, r.top_k)].append(r)
    cells = []
    for (c, k), recs in sorted(by_cell.items()):
        ok = [r for r in recs if r.status == "ok"]
        mean_s = _mean([r.similarity for r in recs])
        cells.append(
            SweepCell(
                chunk_size=c,
                top_k=k,
                mean_similarity=mean_s if mean_s is not None else math.nan,
                mean_cwu_actual=_mean([r.cwu for r in ok]),
                nominal_cwu=c * k / context_length,
                n_ok=len(ok),
                n_overflow=sum(r.status == "overflow" for r in recs),
                n_api_error=sum(r.status == "api_error" for r in recs),
                mean_similarity_ok=_mean([r.similarity for r in ok]),
                mean_cwu_all=_mean([r.cwu for r in recs]),
            )
        )
    return cells


def select_optimum(cells: Sequence[SweepCell], epsilon_tie: float = 0.001) -> OptimumReport:
    """Pick the best cell, preferring the fewest chunks among near-ties.

    Every cell within ``epsilon_tie`` of the maximum mean similarity is
    co-optimal; among those the smallest top-k wins, then the smallest chunk
    size, since fewer retrieved tokens means lower latency.
    """
    if not cells:
        raise InvalidParameterError("select_optimum needs at least one cell")
    top = max(c.mean_similarity for c in cells)
    co = sorted(
        (c for c in cells if c.mean_similarity >= top - epsilon_tie),
        key=lambda c: (-c.mean_similarity, c.top_k, c.chunk_size),
    )
    best = min(co, key=lambda c: (c.top_k, c.chunk_size))
    rationale = (
        f"max mean similarity {top:.4f}; {len(co)} cell(s) within {epsilon_tie:g} of it; "
        f"chose chunk_size={best.chunk_size}, top_k={best.top_k} "
        f"(fewest retrieved chunks, then smallest chunk size)"
    )
    return OptimumReport(best, tuple(co), epsilon_tie, rationale)


def aggregate_by_topk(cells: Sequence[SweepCell]) -> list[TopKSummary]:
    """For each top-k, the best cell across chunk sizes (smallest size on ties)."""
    if not cells:
        raise InvalidParameterError("aggregate_by_topk needs at least one cell")
    best: dict[int, SweepCell] = {}
    for c in sorted(cells, key=lambda c: (c.top_k, c.chunk_size)):
        cur = best.get(c.top_k)
        if cur is None or c.mean_similarity > cur.mean_similarity:
            best[c.top_k] = c
    return [
        TopKSummary(k, c.mean_similarity, c.chunk_size, c.mean_cwu_actual) for k, c in sorted(best.items())
    ]


def _pmap(fn: Callable[[T], R], items: Sequence[T], parallelism: int) -> list[R]:
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(parallelism) as pool:
        return list(pool.map(fn, items))


def _safe_name(qa_id: str) -> str:
    digest = hashlib.sha1(qa_id.encode("utf-8")).hexdigest()[:8]
    return f"{re.sub(r'[^A-Za-z0-9._-]+', '_', qa_id)[:80]}-{digest}"


def _embed_or_none(provider: EmbeddingProvider, texts: Sequence[str], what: str) -> list[EmbeddingVector | None]:
    if not texts:
        return []
    try:
        return list(provider.embed_batch(texts))
    except ProviderError as exc:
        log.error("embedding %s failed: %s", what, exc)
        return [None] * len(texts)


def make_llm(name: str) -> ChatProvider:
    return MockExtractiveLLM() if name == "mock" else ChatCompletionsClient()


def run_sweep(
    config: SweepConfig,
    corpus: Sequence[Document],
    qa_pairs: Sequence[QAPair],
    llm: ChatProvider | None = None,
    embedder: EmbeddingProvider | None = None,
    scorer: EmbeddingProvider | None = None,
) -> SweepResult:
    """Evaluate every (chunk size, top-k, question) triple.

    One index is built per chunk size. Each question is retrieved once per
    chunk size at the largest k; smaller k use prefixes of that ranking.
    Provider failures become ``api_error`` records; the sweep aborts only
    if every record failed that way.
    """
    config.validate()
    if not corpus:
        raise InvalidParameterError("corpus is empty")
    if not qa_pairs:
        raise InvalidParameterError("no QA pairs")
    ids = [q.id for q in qa_pairs]
    if len(set(ids)) != len(ids):
        raise InvalidParameterError("QA ids must be unique")

    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    profile = config.profile
    llm = llm or make_llm(config.llm_provider)
    embedder = embedder or make_embedder(config.embedder)
    if scorer is None:
        scorer = make_embedder(config.scorer) if config.scorer else embedder
    max_k = max(config.top_ks)
    workdir = Path(config.workdir) if config.workdir else None

    question_vecs = _embed_or_none(embedder, [q.question for q in qa_pairs], "questions")
    reference_vecs = _embed_or_none(scorer, [q.answer for q in qa_pairs], "reference answers")

    def build(chunk_size: int) -> tuple[dict[tuple[str, int], Chunk], VectorIndex | None]:
        chunks = [ch for doc in corpus for ch in pack_chunks(doc, chunk_size)]
        by_ref = {ch.ref: ch for ch in chunks}
        vectors = _embed_or_none(embedder, [ch.text for ch in chunks], f"chunks (C={chunk_size})")
        if any(v is None for v in vectors):
            return by_ref, None
        index = build_index([IndexEntry(ch.ref, v, ch.token_count) for ch, v in zip(chunks, vectors)])  # type: ignore[arg-type]
        if workdir is not None:
            persist_index(index, workdir / "index" / f"{chunk_size}.idx")
        return by_ref, index

    built = dict(zip(config.chunk_sizes, _pmap(build, config.chunk_sizes, config.parallelism)))

    def trial(task: tuple[int, int]) -> list[EvalRecord]:
        chunk_size, qi = task
        qa, qvec, rvec = qa_pairs[qi], question_vecs[qi], reference_vecs[qi]
        by_ref, index = built[chunk_size]
        failure = None
        if index is None:
            failure = "chunk embedding failed"
        elif qvec is None:
            failure = "question embedding failed"
        ranking = index.query_top_k(qvec, max_k) if failure is None else RetrievalResult(())  # type: ignore[union-attr,arg-type]
        out = []
        for k in config.top_ks:
            retrieval = RetrievalResult(ranking.hits[:k])
            prompt = assemble_prompt(qa.question, [by_ref[ref].text for ref in retrieval.refs], config.template)
            if failure is None:
                outcome = generate(llm, profile, prompt)
            else:
                outcome = GenerationOutcome("api_error", detail=failure)
            prompt_path = None
            if workdir is not None and config.archive_prompts:
                rel = Path("prompts") / f"C{chunk_size}" / f"k{k}" / f"{_safe_name(qa.id)}.txt"
                (workdir / rel).parent.mkdir(parents=True, exist_ok=True)
                (workdir / rel).write_text(prompt.rendered, encoding="utf-8")
                prompt_path = rel.as_posix()
            out.append(
                evaluate_cell_question(
                    qa, chunk_size, k, retrieval, prompt, outcome, profile, scorer, rvec, prompt_path
                )
            )
        return out

    tasks = [(c, qi) for c in config.chunk_sizes for qi in range(len(qa_pairs))]
    records = [r for batch in _pmap(trial, tasks, config.parallelism) for r in batch]
    records.sort(key=lambda r: (r.chunk_size, r.top_k, r.qa_id))

    n_failed = sum(r.status == "api_error" for r in records)
    if n_failed == len(records):
        details = sorted({r.detail or "" for r in records})[:3]
        raise SweepAborted(f"all {n_failed} trials failed with api_error; e.g. {details}")

    cells = aggregate_cells(records, config.chunk_sizes, config.top_ks, profile.context_length)
    meta = {
        "tokenizer": str(DEFAULT_TOKENIZER.spec),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "n_documents": len(corpus),
        "n_questions": len(qa_pairs),
        "chunks_per_size": {str(c): len(built[c][0]) for c in config.chunk_sizes},
        "oversized_chunks_per_size": {
            str(c): sum(ch.oversized for ch in built[c][0].values()) for c in config.chunk_sizes
        },
    }
    return SweepResult(config.snapshot(), cells, records, select_optimum(cells, config.epsilon_tie), meta)


def write_sweep(result: SweepResult, workdir: str | Path) -> None:
    """Write ``sweep.json`` and ``records.jsonl`` under ``workdir``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    doc = {
        "meta": {**result.meta, "config": result.config},
        "cells": [asdict(c) for c in result.cells],
        "optimum": result.optimum.to_json(),
    }
    (workdir / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    with (workdir / "records.jsonl").open("w", encoding="utf-8") as fh:
        for r in result.records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def load_sweep(workdir: str | Path) -> SweepResult:
    workdir = Path(workdir)
    doc = json.loads((workdir / "sweep.json").read_text(encoding="utf-8"))
    cells = [SweepCell(**c) for c in doc["cells"]]
    records = []
    records_path = workdir / "records.jsonl"
    if records_path.exists():
        with records_path.open(encoding="utf-8") as fh:
            records = [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]
    meta = dict(doc["meta"])
    config = meta.pop("config", {})
    eps = doc.get("optimum", {}).get("epsilon_tie", config.get("epsilon_tie", 0.001))
    return SweepResult(config, cells, records, select_optimum(cells, eps), meta)
