"""Answer scoring and per-trial evaluation records."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

from ragcwu.embedding import EmbeddingProvider, EmbeddingVector, cosine_similarity
from ragcwu.errors import InvalidParameterError, ProviderError
from ragcwu.llm import GenerationOutcome, ModelProfile, Prompt
from ragcwu.qa_dataset import QAPair
from ragcwu.vector_index import RetrievalResult

# Similarity recorded when generation could not produce an answer
# (context overflow or an API error); keeps failed cells on the heatmap scale.
SENTINEL = 0.5

Status = Literal["ok", "overflow", "api_error"]
_STATUS = {"ok": "ok", "context_overflow": "overflow", "api_error": "api_error"}


def cwu(used_tokens: int, context_length: int) -> float:
    """Context window utilization ``used_tokens / context_length``, unclamped."""
    if context_length < 1:
        raise InvalidParameterError(f"context_length must be >= 1, got {context_length}")
    return used_tokens / context_length


def similarity_from_vectors(candidate: EmbeddingVector, reference: EmbeddingVector) -> float:
    return max(0.0, cosine_similarity(candidate, reference))


def score_answer(
    candidate: str,
    reference: str,
    scorer: EmbeddingProvider,
    reference_vec: EmbeddingVector | None = None,
) -> float:
    """Cosine similarity of the two texts' embeddings, negatives clamped to 0.

    ``reference_vec`` skips re-embedding a reference scored many times.
    """
    if not reference.strip():
        raise InvalidParameterError("reference answer is empty")
    if not candidate.strip():
        return 0.0
    if reference_vec is None:
        cand_vec, reference_vec = scorer.embed_batch([candidate, reference])
    else:
        (cand_vec,) = scorer.embed_batch([candidate])
    return similarity_from_vectors(cand_vec, reference_vec)


@dataclass(frozen=True)
class EvalRecord:
    qa_id: str
    chunk_size: int
    top_k: int
    similarity: float
    prompt_tokens: int
    cwu: float
    status: Status
    retrieved: list[tuple[str, int]] = field(default_factory=list)
    answer: str | None = None
    http_status: int | None = None
    detail: str | None = None
    prompt_path: str | None = None

    @property
    def n_retrieved(self) -> int:
        return len(self.retrieved)

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "chunk_size": self.chunk_size,
            "top_k": self.top_k,
            "similarity": self.similarity,
            "prompt_tokens": self.prompt_tokens,
            "cwu": self.cwu,
            "status": self.status,
            "retrieved": [list(r) for r in self.retrieved],
            "n_retrieved": self.n_retrieved,
            "answer": self.answer,
            "http_status": self.http_status,
            "detail": self.detail,
            "prompt_path": self.prompt_path,
        }

    @classmethod
    def from_json(cls, row: dict) -> EvalRecord:
        return cls(
            qa_id=row["qa_id"],
            chunk_size=row["chunk_size"],
            top_k=row["top_k"],
            similarity=row["similarity"],
            prompt_tokens=row["prompt_tokens"],
            cwu=row["cwu"],
            status=row["status"],
            retrieved=[(d, i) for d, i in row["retrieved"]],
            answer=row.get("answer"),
            http_status=row.get("http_status"),
            detail=row.get("detail"),
            prompt_path=row.get("prompt_path"),
        )


def evaluate_cell_question(
    qa: QAPair,
    chunk_size: int,
    top_k: int,
    retrieval: RetrievalResult,
    prompt: Prompt,
    outcome: GenerationOutcome,
    profile: ModelProfile,
    scorer: EmbeddingProvider,
    reference_vec: EmbeddingVector | None = None,
    prompt_path: str | None = None,
) -> EvalRecord:
    """Turn one trial into an ``EvalRecord``; failures become sentinel records."""
    used = prompt.prompt_tokens
    common = dict(
        qa_id=qa.id,
        chunk_size=chunk_size,
        top_k=top_k,
        prompt_tokens=used,
        cwu=cwu(used, profile.context_length),
        retrieved=retrieval.refs,
        prompt_path=prompt_path,
    )
    if outcome.status != "ok":
        return EvalRecord(
            similarity=SENTINEL,
            status=_STATUS[outcome.status],  # type: ignore[arg-type]
            http_status=outcome.http_status,
            detail=outcome.detail,
            **common,
        )
    answer = outcome.answer or ""
    try:
        s = score_answer(answer, qa.answer, scorer, reference_vec)
    except ProviderError as exc:
        return EvalRecord(
            similarity=SENTINEL,
            status="api_error",
            answer=answer,
            http_status=exc.status_code,
            detail=f"scorer: {exc}",
            **common,
        )
    return EvalRecord(similarity=s, status="ok", answer=answer, **common)
