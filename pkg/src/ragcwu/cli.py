"""Command-line entry point: ``ragcwu {ingest,genqa,sweep,report,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from ragcwu.chunking import Document, load_corpus, pack_chunks
from ragcwu.config import ConfigError, RunConfig, read_config_file
from ragcwu.errors import QAFormatError, SweepAborted
from ragcwu.llm import ChatCompletionsClient, template_overhead
from ragcwu.qa_dataset import MockQAWriter, check_sources, generate_qa, load_qa, save_qa
from ragcwu.report import emit_all
from ragcwu.sweep import load_sweep, run_sweep, write_sweep
from ragcwu.tokenization import count_tokens

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROVIDER = 3
EXIT_ABORTED = 4


class CommandError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--corpus", help="directory of UTF-8 .txt files")
    common.add_argument("--qa", help="QA pairs JSONL (default: {workdir}/qa.jsonl)")
    common.add_argument("--workdir", help="output directory")
    common.add_argument("--chunk-sizes", type=_int_list, help="e.g. 128,256,512")
    common.add_argument("--top-ks", type=_int_list, help="e.g. 1,2,3")
    common.add_argument("--context-length", type=int)
    common.add_argument("--max-output-tokens", type=int)
    common.add_argument("--parallelism", type=int)
    common.add_argument("--provider", choices=["remote", "mock"])
    common.add_argument("--embedder", choices=["remote", "hashing"])
    common.add_argument("--epsilon-tie", type=float)
    common.add_argument("--n-per-doc", type=int)
    common.add_argument("--archive-prompts", action="store_true", default=None)
    common.add_argument("--exclude-sentinels", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ragcwu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="summarise a corpus")
    sub.add_parser("genqa", parents=[common], help="generate reference QA pairs")
    sub.add_parser("sweep", parents=[common], help="run the chunk-size x top-k grid")
    sub.add_parser("report", parents=[common], help="regenerate report files from a workdir")
    sub.add_parser("validate", parents=[common], help="dry run: chunk counts and overflow flags")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else None
    flags = {
        "corpus": args.corpus,
        "qa": args.qa,
        "workdir": args.workdir,
        "chunk_sizes": args.chunk_sizes,
        "top_ks": args.top_ks,
        "model.context_length": args.context_length,
        "model.max_output_tokens": args.max_output_tokens,
        "model.provider": args.provider,
        "embedder.kind": args.embedder,
        "parallelism": args.parallelism,
        "epsilon_tie": args.epsilon_tie,
        "n_per_doc": args.n_per_doc,
        "archive_prompts": args.archive_prompts,
        "exclude_sentinels": args.exclude_sentinels,
    }
    return RunConfig.resolve(file_values, flags)


def _print_effective(cfg: RunConfig, archive: bool) -> None:
    text = json.dumps(cfg.values, indent=2, sort_keys=True)
    print("effective config:\n" + text, file=sys.stderr)
    if archive:
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        (cfg.workdir / "effective_config.json").write_text(text + "\n", encoding="utf-8")


def _corpus(cfg: RunConfig) -> list[Document]:
    root = cfg.corpus_dir
    if root is None:
        raise CommandError("no corpus given (--corpus or 'corpus' in the config file)", EXIT_INPUT)
    if not root.is_dir():
        raise CommandError(f"corpus directory not found: {root}", EXIT_INPUT)
    docs = load_corpus(root)
    if not docs:
        raise CommandError(f"no .txt files under {root}", EXIT_INPUT)
    return docs


def _check_providers(cfg: RunConfig) -> None:
    problems = cfg.provider_problems()
    if problems:
        raise CommandError("provider misconfiguration:\n  " + "\n  ".join(problems), EXIT_PROVIDER)


def cmd_ingest(cfg: RunConfig) -> int:
    docs = _corpus(cfg)
    total_s = total_t = 0
    print("doc_id\tsentences\ttokens")
    for d in docs:
        n_tok = count_tokens(d.text)
        total_s += len(d.sentences)
        total_t += n_tok
        print(f"{d.id}\t{len(d.sentences)}\t{n_tok}")
    print(f"# {len(docs)} documents, {total_s} sentences, {total_t} tokens")
    return EXIT_OK


def cmd_genqa(cfg: RunConfig) -> int:
    docs = _corpus(cfg)
    _check_providers(cfg)
    _print_effective(cfg, archive=True)
    provider = MockQAWriter() if cfg["model"]["provider"] == "mock" else ChatCompletionsClient()
    result = generate_qa(provider, cfg.profile(), docs, int(cfg["n_per_doc"]), int(cfg["parallelism"]))
    save_qa(result.pairs, cfg.qa_path)
    print(f"wrote {len(result.pairs)} QA pairs to {cfg.qa_path}")
    if result.dropped_lines:
        print(f"dropped {result.dropped_lines} unparseable lines", file=sys.stderr)
    for doc_id in result.truncated_docs:
        print(f"truncated to fit the prompt budget: {doc_id}", file=sys.stderr)
    for doc_id in result.empty_docs:
        print(f"no parseable pairs: {doc_id}", file=sys.stderr)
    for doc_id, why in result.failed_docs.items():
        print(f"generation failed: {doc_id}: {why}", file=sys.stderr)
    if not result.pairs and result.failed_docs:
        raise CommandError("QA generation failed for every document", EXIT_ABORTED)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    docs = _corpus(cfg)
    if not cfg.qa_path.is_file():
        raise CommandError(f"QA file not found: {cfg.qa_path}", EXIT_INPUT)
    try:
        pairs = load_qa(cfg.qa_path)
    except QAFormatError as exc:
        raise CommandError(f"{cfg.qa_path}: {exc}", EXIT_INPUT) from exc
    if not pairs:
        raise CommandError(f"{cfg.qa_path} holds no QA pairs", EXIT_INPUT)
    missing = check_sources(pairs, (d.id for d in docs))
    if missing:
        raise CommandError("QA pairs cite documents outside the corpus:\n  " + "\n  ".join(missing[:10]), EXIT_INPUT)
    _check_providers(cfg)
    sweep_cfg = cfg.sweep_config()
    _print_effective(cfg, archive=True)
    try:
        result = run_sweep(sweep_cfg, docs, pairs)
    except SweepAborted as exc:
        raise CommandError(f"sweep aborted: {exc}", EXIT_ABORTED) from exc
    write_sweep(result, cfg.workdir)
    emit_all(result, cfg.workdir / "report", bool(cfg["exclude_sentinels"]))
    best = result.optimum.best
    cwu_txt = "n/a" if best.mean_cwu_actual is None else f"{100 * best.mean_cwu_actual:.1f}%"
    print(
        f"optimum: chunk_size={best.chunk_size} top_k={best.top_k} "
        f"mean_similarity={best.mean_similarity:.4f} cwu={cwu_txt}"
    )
    print(result.optimum.rationale)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    workdir = cfg.workdir
    if not (workdir / "sweep.json").is_file():
        raise CommandError(f"no sweep.json in {workdir}; run 'ragcwu sweep' first", EXIT_INPUT)
    result = load_sweep(workdir)
    for path in emit_all(result, workdir / "report", bool(cfg["exclude_sentinels"])):
        print(path)
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    docs = _corpus(cfg)
    sweep_cfg = cfg.sweep_config()
    profile = sweep_cfg.profile
    overhead = template_overhead(sweep_cfg.template)
    budget = profile.context_length - profile.max_output_tokens
    print(f"# L={profile.context_length} max_output_tokens={profile.max_output_tokens} template_overhead={overhead}")
    print("chunk_size\ttop_k\tn_chunks\tnominal_cwu\tnominal_overflow\tguaranteed_overflow")
    n_flagged = 0
    for c in sweep_cfg.chunk_sizes:
        sizes = sorted(ch.token_count for d in docs for ch in pack_chunks(d, c))
        for k in sweep_cfg.top_ks:
            nominal = c * k + overhead > budget
            # the k smallest chunks plus their '---' separators bound any retrieval from below
            separators = 3 * (min(k, len(sizes)) - 1) if sizes else 0
            guaranteed = sum(sizes[:k]) + overhead + separators > budget
            n_flagged += nominal
            print(
                f"{c}\t{k}\t{len(sizes)}\t{c * k / profile.context_length:.4f}\t"
                f"{'yes' if nominal else 'no'}\t{'yes' if guaranteed else 'no'}"
            )
    print(f"# {n_flagged} of {len(sweep_cfg.chunk_sizes) * len(sweep_cfg.top_ks)} cells exceed the budget nominally")
    problems = cfg.provider_problems()
    for p in problems:
        print(f"# provider problem: {p}", file=sys.stderr)
    return EXIT_PROVIDER if problems else EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "genqa": cmd_genqa,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
