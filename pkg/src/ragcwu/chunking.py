"""Sentence splitting and greedy whole-sentence chunk packing."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from ragcwu.errors import InvalidParameterError
from ragcwu.tokenization import DEFAULT_TOKENIZER, Tokenizer

ABBREVIATIONS = frozenset(
    {"e.g.", "i.e.", "etc.", "vs.", "Dr.", "Mr.", "Mrs.", "Ms.", "Prof.", "Fig.", "No.", "Inc."}
)

_CLOSERS = "\"')]}”’»"
_OPENERS = "\"'([{“‘«"
# A terminator run, its trailing closers, then whitespace.
_CANDIDATE_RE = re.compile(r"[.!?]+[" + re.escape(_CLOSERS) + r"]*(?=\s)")
_BLANK_LINE_RE = re.compile(r"\n[^\S\n]*\n")

Span = tuple[int, int]


def _guarded(text: str, term_start: int, term_end: int) -> bool:
    """True if the terminator run ending the word before ``term_end`` is an
    abbreviation or initial rather than a sentence end."""
    if text[term_end - 1] != "." or term_end - term_start != 1:
        return False
    word_start = term_start
    while word_start > 0 and not text[word_start - 1].isspace():
        word_start -= 1
    word = text[word_start:term_end].lstrip(_OPENERS)
    if word in ABBREVIATIONS:
        return True
    return len(word) == 2 and word[0].isalpha()


def split_sentences(text: str) -> list[Span]:
    """Return ``(start, end)`` character spans of the sentences in ``text``.

    Spans are trimmed of surrounding whitespace, ascending and disjoint, and
    together cover every non-whitespace character.
    """
    cuts = {0, len(text)}
    for m in _BLANK_LINE_RE.finditer(text):
        cuts.add(m.start())
    for m in _CANDIDATE_RE.finditer(text):
        term = m.group().rstrip(_CLOSERS)
        if not _guarded(text, m.start(), m.start() + len(term)):
            cuts.add(m.end())

    spans = []
    bounds = sorted(cuts)
    for lo, hi in zip(bounds, bounds[1:]):
        start, end = lo, hi
        while start < end and text[start].isspace():
            start += 1
        while end > start and text[end - 1].isspace():
            end -= 1
        if start < end:
            spans.append((start, end))
    return spans


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    sentences: tuple[Span, ...] = ()

    def __post_init__(self) -> None:
        if not self.sentences:
            object.__setattr__(self, "sentences", tuple(split_sentences(self.text)))


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    chunk_index: int
    text: str
    span: Span
    sentence_range: tuple[int, int]
    token_count: int
    oversized: bool = False

    @property
    def ref(self) -> tuple[str, int]:
        return (self.doc_id, self.chunk_index)


def pack_chunks(doc: Document, chunk_size: int, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``chunk_size`` tokens.

    A sentence longer than the budget becomes a chunk of its own, unsplit,
    and is flagged ``oversized``. Chunks never overlap.
    """
    if chunk_size < 1:
        raise InvalidParameterError(f"chunk_size must be >= 1, got {chunk_size}")

    counts = [tokenizer.count(doc.text[s:e]) for s, e in doc.sentences]
    chunks: list[Chunk] = []
    first = 0
    total = 0

    def close(last: int) -> None:
        start, end = doc.sentences[first][0], doc.sentences[last][1]
        chunks.append(
            Chunk(
                doc_id=doc.id,
                chunk_index=len(chunks),
                text=doc.text[start:end],
                span=(start, end),
                sentence_range=(first, last),
                token_count=total,
                oversized=total > chunk_size,
            )
        )

    for i, n in enumerate(counts):
        if i > first and total + n > chunk_size:
            close(i - 1)
            first, total = i, 0
        total += n
    if counts:
        close(len(counts) - 1)
    return chunks


def load_corpus(root: str | Path) -> list[Document]:
    """Read every ``.txt`` file under ``root`` (recursively), sorted by id.

    The document id is the path relative to ``root`` with '/' separators.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    docs = []
    for path in root.rglob("*.txt"):
        if path.is_file():
            docs.append(Document(path.relative_to(root).as_posix(), path.read_text(encoding="utf-8")))
    docs.sort(key=lambda d: d.id)
    return docs
