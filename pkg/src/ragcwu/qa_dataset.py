"""Reference question-answer pairs: generation by an LLM and JSONL storage."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

from ragcwu.chunking import Document, split_sentences
from ragcwu.errors import QAFormatError
from ragcwu.llm import ChatProvider, ModelProfile, Prompt, generate, make_prompt
from ragcwu.tokenization import DEFAULT_TOKENIZER, Tokenizer, tokenize

log = logging.getLogger(__name__)

QA_PROMPT_VERSION = "v1"
Kind = Literal["what", "how", "why", "other"]
_KIND_RE = re.compile(r"(what|how|why)\b", re.IGNORECASE)


@dataclass(frozen=True)
class QAPair:
    id: str
    question: str
    answer: str
    source_docs: tuple[str, ...] = ()
    kind: Kind = "other"

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise QAFormatError(f"pair {self.id!r} has an empty question")
        if not self.answer.strip():
            raise QAFormatError(f"pair {self.id!r} has an empty answer")


def classify_kind(question: str) -> Kind:
    m = _KIND_RE.match(question.strip())
    return m.group(1).lower() if m else "other"  # type: ignore[return-value]


def save_qa(pairs: Iterable[QAPair], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in pairs:
            row = asdict(p)
            row["source_docs"] = list(p.source_docs)
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_qa(path: str | Path) -> list[QAPair]:
    pairs: list[QAPair] = []
    seen: set[str] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pair = QAPair(
                    id=str(row["id"]),
                    question=row["question"],
                    answer=row["answer"],
                    source_docs=tuple(row.get("source_docs", ())),
                    kind=row.get("kind") or classify_kind(row["question"]),
                )
            except QAFormatError as exc:
                raise QAFormatError(str(exc), lineno) from exc
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise QAFormatError(f"malformed QA record: {exc}", lineno) from exc
            if pair.kind not in ("what", "how", "why", "other"):
                raise QAFormatError(f"unknown kind {pair.kind!r}", lineno)
            if pair.id in seen:
                raise QAFormatError(f"duplicate id {pair.id!r}", lineno)
            seen.add(pair.id)
            pairs.append(pair)
    return pairs


def check_sources(pairs: Sequence[QAPair], doc_ids: Iterable[str]) -> list[str]:
    """Return a message for every source_doc that is not in the corpus."""
    known = set(doc_ids)
    return [f"{p.id}: unknown source doc {d!r}" for p in pairs for d in p.source_docs if d not in known]


def _load_template() -> tuple[str, str]:
    text = resources.files("ragcwu").joinpath(f"assets/qa_prompt_{QA_PROMPT_VERSION}.txt").read_text("utf-8")
    _, rest = text.split("=== system ===\n", 1)
    system, user = rest.split("=== user ===\n", 1)
    return system.strip(), user.rstrip("\n")


QA_SYSTEM, QA_USER = _load_template()


def qa_prompt(document_text: str, n: int, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Prompt:
    user = QA_USER.replace("{n}", str(n)).replace("{document}", document_text)
    return make_prompt(QA_SYSTEM, user, context_chunks=[document_text], tokenizer=tokenizer)


def parse_qa_lines(text: str) -> tuple[list[tuple[str, str]], int]:
    """Extract ``(question, answer)`` pairs from a JSON-lines reply.

    Returns the pairs and the number of non-blank lines that were dropped.
    Markdown code fences are ignored.
    """
    pairs, dropped = [], 0
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("```"):
            continue
        try:
            obj = json.loads(line)
            q, a = obj["question"], obj["answer"]
            if not (isinstance(q, str) and isinstance(a, str) and q.strip() and a.strip()):
                raise ValueError("empty or non-string field")
        except (ValueError, KeyError, TypeError):
            dropped += 1
            continue
        pairs.append((q.strip(), a.strip()))
    return pairs, dropped


@dataclass
class QAGenerationResult:
    pairs: list[QAPair] = field(default_factory=list)
    dropped_lines: int = 0
    truncated_docs: list[str] = field(default_factory=list)
    empty_docs: list[str] = field(default_factory=list)
    failed_docs: dict[str, str] = field(default_factory=dict)


def _truncate(text: str, budget: int, tokenizer: Tokenizer) -> str:
    toks = tokenizer.tokenize(text)
    if len(toks) <= budget:
        return text
    return text[: toks[budget - 1].end] if budget > 0 else ""


def generate_qa(
    provider: ChatProvider,
    profile: ModelProfile,
    corpus: Sequence[Document],
    n_per_doc: int = 5,
    parallelism: int = 1,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> QAGenerationResult:
    """Ask ``provider`` for ``n_per_doc`` pairs per document.

    Documents too long for the prompt budget are cut to their leading tokens
    and listed in ``truncated_docs``. Pair ids are ``"{doc_id}#{ordinal}"``.
    """
    result = QAGenerationResult()
    if n_per_doc <= 0:
        return result
    overhead = qa_prompt("", n_per_doc, tokenizer).prompt_tokens
    budget = profile.context_length - profile.max_output_tokens - overhead

    def one(doc: Document):
        text = _truncate(doc.text, budget, tokenizer)
        outcome = generate(provider, profile, qa_prompt(text, n_per_doc, tokenizer))
        return doc, text != doc.text, outcome

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            outcomes = list(pool.map(one, corpus))
    else:
        outcomes = [one(d) for d in corpus]

    for doc, truncated, outcome in sorted(outcomes, key=lambda t: t[0].id):
        if truncated:
            result.truncated_docs.append(doc.id)
        if outcome.status != "ok":
            result.failed_docs[doc.id] = outcome.detail or outcome.status
            log.warning("QA generation failed for %s: %s", doc.id, outcome.detail)
            continue
        found, dropped = parse_qa_lines(outcome.answer or "")
        result.dropped_lines += dropped
        if not found:
            result.empty_docs.append(doc.id)
        for i, (q, a) in enumerate(found):
            result.pairs.append(QAPair(f"{doc.id}#{i}", q, a, (doc.id,), classify_kind(q)))
    return result


class MockQAWriter:
    """Offline stand-in for the QA-writing model.

    Turns evenly spaced sentences of the document into What/How/Why questions
    whose reference answer is the sentence itself.
    """

    kind = "mock"
    _N_RE = re.compile(r"write (\d+) question-answer pairs")
    _STEMS = ("What does the text say about {}?", "How does the text describe {}?", "Why does the text mention {}?")

    def complete(self, profile: ModelProfile, prompt: Prompt) -> str:
        m = self._N_RE.search(prompt.user_text)
        n = int(m.group(1)) if m else 1
        document = prompt.context_chunks[0] if prompt.context_chunks else ""
        sentences = [document[s:e] for s, e in split_sentences(document)]
        if not sentences:
            return ""
        lines = []
        for i in range(n):
            sentence = sentences[i * len(sentences) // n]
            words = [t.text for t in tokenize(sentence) if t.kind == "word"][:8]
            question = self._STEMS[i % 3].format(" ".join(words))
            lines.append(json.dumps({"question": question, "answer": sentence}, ensure_ascii=False))
        return "\n".join(lines)
