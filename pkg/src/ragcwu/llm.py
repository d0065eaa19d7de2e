"""Prompt assembly and answer generation under a context-window budget."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Protocol, Sequence

import httpx

from ragcwu._http import auth_headers, post_json
from ragcwu.chunking import split_sentences
from ragcwu.errors import InvalidParameterError, ProviderError
from ragcwu.tokenization import DEFAULT_TOKENIZER, Tokenizer, word_set

log = logging.getLogger(__name__)

CONTEXT_SEPARATOR = "\n\n---\n\n"
NO_ANSWER = "I don't know."
_SLOT_RE = re.compile(r"\{(context|question)\}")


@dataclass(frozen=True)
class ModelProfile:
    name: str
    context_length: int
    max_output_tokens: int = 256
    endpoint_url: str | None = None
    api_key_env: str = "CWU_API_KEY"

    def __post_init__(self) -> None:
        if self.context_length < 1:
            raise InvalidParameterError(f"context_length must be >= 1, got {self.context_length}")
        if self.max_output_tokens < 1:
            raise InvalidParameterError(f"max_output_tokens must be >= 1, got {self.max_output_tokens}")


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: str


DEFAULT_TEMPLATE = PromptTemplate(
    system="Answer the question using only the provided context.",
    user="Context:\n{context}\n\nQuestion: {question}\nAnswer:",
)


@dataclass(frozen=True)
class Prompt:
    system_text: str
    user_text: str
    question: str
    context_chunks: tuple[str, ...]
    rendered: str
    prompt_tokens: int


def render_messages(system_text: str, user_text: str) -> str:
    return f"{system_text}\n\n{user_text}"


def make_prompt(
    system_text: str,
    user_text: str,
    question: str = "",
    context_chunks: Sequence[str] = (),
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> Prompt:
    rendered = render_messages(system_text, user_text)
    return Prompt(system_text, user_text, question, tuple(context_chunks), rendered, tokenizer.count(rendered))


def assemble_prompt(
    question: str,
    chunks: Sequence[str],
    template: PromptTemplate = DEFAULT_TEMPLATE,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> Prompt:
    """Fill ``template`` with the chunk texts (in the given order) and question.

    ``prompt_tokens`` counts the whole rendered prompt, system text included.
    """
    slots = {"context": CONTEXT_SEPARATOR.join(chunks), "question": question}
    user = _SLOT_RE.sub(lambda m: slots[m.group(1)], template.user)
    return make_prompt(template.system, user, question, chunks, tokenizer)


def template_overhead(template: PromptTemplate = DEFAULT_TEMPLATE, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> int:
    """Tokens in the rendered template with both slots empty."""
    return assemble_prompt("", [], template, tokenizer).prompt_tokens


@dataclass(frozen=True)
class GenerationOutcome:
    status: Literal["ok", "context_overflow", "api_error"]
    answer: str | None = None
    http_status: int | None = None
    detail: str | None = None


class ChatProvider(Protocol):
    def complete(self, profile: ModelProfile, prompt: Prompt) -> str: ...


def fits(prompt: Prompt, profile: ModelProfile) -> bool:
    return prompt.prompt_tokens + profile.max_output_tokens <= profile.context_length


def generate(provider: ChatProvider, profile: ModelProfile, prompt: Prompt) -> GenerationOutcome:
    """Run one generation; never raises.

    Prompts that leave no room for ``max_output_tokens`` are rejected as
    ``context_overflow`` before the provider is touched.
    """
    if not fits(prompt, profile):
        return GenerationOutcome(
            "context_overflow",
            detail=f"{prompt.prompt_tokens} + {profile.max_output_tokens} > {profile.context_length}",
        )
    try:
        answer = provider.complete(profile, prompt)
    except ProviderError as exc:
        return GenerationOutcome("api_error", http_status=exc.status_code, detail=str(exc))
    except Exception as exc:  # noqa: BLE001 - outcomes are total
        log.exception("provider raised unexpectedly")
        return GenerationOutcome("api_error", detail=repr(exc))
    if not answer or not answer.strip():
        return GenerationOutcome("api_error", detail="empty answer")
    return GenerationOutcome("ok", answer=answer)


@lru_cache(maxsize=1 << 14)
def _sentences_with_words(text: str) -> tuple[tuple[str, frozenset[str]], ...]:
    out = []
    for s, e in split_sentences(text):
        sentence = text[s:e]
        out.append((sentence, word_set(sentence)))
    return tuple(out)


def mock_extractive_generate(prompt: Prompt) -> str:
    """Return the context sentence with the highest word-set Jaccard overlap
    with the question; the earliest sentence wins ties."""
    q = word_set(prompt.question)
    best, best_score = None, -1.0
    for chunk in prompt.context_chunks:
        for sentence, words in _sentences_with_words(chunk):
            union = len(q | words)
            score = len(q & words) / union if union else 0.0
            if score > best_score:
                best, best_score = sentence, score
    return NO_ANSWER if best is None else best


class MockExtractiveLLM:
    """Deterministic offline stand-in for a chat model."""

    kind = "mock"

    def complete(self, profile: ModelProfile, prompt: Prompt) -> str:
        return mock_extractive_generate(prompt)


class ChatCompletionsClient:
    """OpenAI-compatible ``/chat/completions`` client, temperature 0."""

    kind = "remote"

    def __init__(
        self,
        max_retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ) -> None:
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)

    def complete(self, profile: ModelProfile, prompt: Prompt) -> str:
        if not profile.endpoint_url:
            raise ProviderError(f"model {profile.name!r} has no endpoint_url")
        if not fits(prompt, profile):
            raise ProviderError("prompt exceeds the context budget; refusing to send")
        payload = {
            "model": profile.name,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
            "max_tokens": profile.max_output_tokens,
            "temperature": 0,
        }
        body = post_json(
            self.client,
            profile.endpoint_url.rstrip("/") + "/chat/completions",
            payload,
            auth_headers(profile.api_key_env),
            max_retries=self.max_retries,
            backoff=self.backoff,
        )
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc!r}") from exc
