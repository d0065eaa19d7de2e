"""Layered run configuration: defaults, then a TOML file, then CLI flags."""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ragcwu.embedding import EmbeddingProviderConfig
from ragcwu.errors import InvalidParameterError
from ragcwu.llm import ModelProfile
from ragcwu.sweep import DEFAULT_CHUNK_SIZES, DEFAULT_TOP_KS, SweepConfig

DEFAULTS: dict[str, Any] = {
    "corpus": None,
    "qa": None,
    "workdir": "cwu-run",
    "chunk_sizes": list(DEFAULT_CHUNK_SIZES),
    "top_ks": list(DEFAULT_TOP_KS),
    "epsilon_tie": 0.001,
    "parallelism": 4,
    "seed": 0,
    "n_per_doc": 5,
    "archive_prompts": False,
    "exclude_sentinels": False,
    "model": {
        "provider": "remote",
        "name": "llama3-70b-instruct",
        "context_length": 8192,
        "max_output_tokens": 256,
        "endpoint_url": None,
        "api_key_env": "CWU_API_KEY",
    },
    "embedder": {
        "kind": "hashing",
        "endpoint_url": None,
        "model_name": None,
        "dim": 256,
        "batch_size": 32,
        "api_key_env": "CWU_API_KEY",
        "max_retries": 3,
        "max_input_tokens": None,
    },
    "scorer": None,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict[str, Any], layer: dict[str, Any], where: str) -> None:
    for key, value in layer.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if key == "scorer" and isinstance(value, dict):
            scorer = copy.deepcopy(DEFAULTS["embedder"]) if base[key] is None else base[key]
            _merge(scorer, value, "scorer.")
            base[key] = scorer
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}{key}' must be a table")
            _merge(base[key], value, f"{key}.")
        else:
            base[key] = value


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def resolve(cls, file_values: dict[str, Any] | None = None, flags: dict[str, Any] | None = None) -> RunConfig:
        """Flags override file values, which override ``DEFAULTS``.

        ``flags`` uses dotted keys for nested values (``"model.context_length"``);
        ``None`` means "not given".
        """
        values = copy.deepcopy(DEFAULTS)
        _merge(values, file_values or {}, "")
        for dotted, value in (flags or {}).items():
            if value is None:
                continue
            head, _, tail = dotted.partition(".")
            if tail:
                _merge(values, {head: {tail: value}}, "")
            else:
                _merge(values, {head: value}, "")
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def workdir(self) -> Path:
        return Path(self.values["workdir"]).resolve()

    @property
    def corpus_dir(self) -> Path | None:
        return Path(self.values["corpus"]).resolve() if self.values["corpus"] else None

    @property
    def qa_path(self) -> Path:
        qa = self.values["qa"]
        return Path(qa).resolve() if qa else self.workdir / "qa.jsonl"

    def profile(self) -> ModelProfile:
        m = self.values["model"]
        try:
            return ModelProfile(
                name=m["name"],
                context_length=int(m["context_length"]),
                max_output_tokens=int(m["max_output_tokens"]),
                endpoint_url=m["endpoint_url"],
                api_key_env=m["api_key_env"],
            )
        except (InvalidParameterError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model settings: {exc}") from exc

    def embedder(self, which: str = "embedder") -> EmbeddingProviderConfig | None:
        raw = self.values[which]
        return None if raw is None else EmbeddingProviderConfig(**raw)

    def sweep_config(self) -> SweepConfig:
        cfg = SweepConfig(
            profile=self.profile(),
            chunk_sizes=tuple(int(c) for c in self.values["chunk_sizes"]),
            top_ks=tuple(int(k) for k in self.values["top_ks"]),
            llm_provider=self.values["model"]["provider"],
            embedder=self.embedder(),  # type: ignore[arg-type]
            scorer=self.embedder("scorer"),
            epsilon_tie=float(self.values["epsilon_tie"]),
            parallelism=int(self.values["parallelism"]),
            seed=int(self.values["seed"]),
            workdir=self.workdir,
            archive_prompts=bool(self.values["archive_prompts"]),
        )
        try:
            cfg.validate()
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def provider_problems(self) -> list[str]:
        """Misconfigurations that would make provider calls impossible."""
        problems = []
        m = self.values["model"]
        if m["provider"] not in ("remote", "mock"):
            problems.append(f"model.provider must be 'remote' or 'mock', got {m['provider']!r}")
        elif m["provider"] == "remote" and not m["endpoint_url"]:
            problems.append("model.provider is 'remote' but model.endpoint_url is not set")
        for which in ("embedder", "scorer"):
            try:
                cfg = self.embedder(which)
                if cfg is not None:
                    cfg.validate()
            except (InvalidParameterError, TypeError) as exc:
                problems.append(f"{which}: {exc}")
        return problems
