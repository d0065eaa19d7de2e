"""Rule-based word/punctuation tokenizer.

A token is either a maximal run of word characters (Unicode letters, digits,
underscore) or a single non-whitespace character of any other kind.
Whitespace never produces tokens. All token budgets in the package (chunk
size, context length, prompt tokens) are measured in these units.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Literal, Protocol

_TOKEN_RE = re.compile(r"(\w+)|[^\w\s]")


@dataclass(frozen=True)
class TokenizerSpec:
    name: str
    version: str

    def __str__(self) -> str:
        return f"{self.name}/{self.version}"


@dataclass(frozen=True, slots=True)
class Token:
    text: str
    start: int
    end: int
    kind: Literal["word", "punct"]


class Tokenizer(Protocol):
    spec: TokenizerSpec

    def tokenize(self, text: str) -> list[Token]: ...

    def count(self, text: str) -> int: ...


class WordPunctTokenizer:
    spec = TokenizerSpec("wordpunct", "1")

    def tokenize(self, text: str) -> list[Token]:
        return [
            Token(m.group(), m.start(), m.end(), "word" if m.group(1) is not None else "punct")
            for m in _TOKEN_RE.finditer(text)
        ]

    def count(self, text: str) -> int:
        return len(_TOKEN_RE.findall(text))


DEFAULT_TOKENIZER = WordPunctTokenizer()


def tokenize(text: str) -> list[Token]:
    return DEFAULT_TOKENIZER.tokenize(text)


def count_tokens(text: str) -> int:
    return DEFAULT_TOKENIZER.count(text)


def word_set(text: str) -> frozenset[str]:
    """Lowercased word tokens of ``text`` (punctuation dropped)."""
    return frozenset(m.group(1).lower() for m in _TOKEN_RE.finditer(text) if m.group(1) is not None)
