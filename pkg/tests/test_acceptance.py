"""Exit criteria. Each test carries ``acceptance(n, title)``; conftest prints
one PASS/FAIL line per criterion."""
import csv
import json
import math
import random
import struct
import time
import xml.etree.ElementTree as ET
from fractions import Fraction

import httpx
import numpy as np
import pytest

from ragcwu.chunking import Document, pack_chunks
from ragcwu.cli import main
from ragcwu.embedding import EmbeddingVector
from ragcwu.evaluator import cwu
from ragcwu.llm import ChatCompletionsClient, ModelProfile, assemble_prompt, generate, make_prompt
from ragcwu.qa_dataset import save_qa
from ragcwu.report import emit_all
from ragcwu.sweep import SweepConfig, run_sweep, select_optimum, write_sweep
from ragcwu.tokenization import count_tokens
from ragcwu.vector_index import build_index
from reported_optima import REPORTED_OPTIMA, fixture_cells
from synth import generated_document, planted_corpus, pseudo_word
from test_vector_index import brute_force, random_entries

acceptance = pytest.mark.acceptance
SIZES = (128, 256, 512, 1024, 2048)


# 1 ---------------------------------------------------------------------------

@acceptance(1, "reported optima recovered from seeded grids (<1 s)")
def test_1_reported_table():
    start = time.perf_counter()
    expected = {
        ("llama3", "wikipedia"): (512, 12, 0.9741),
        ("llama3", "legal"): (1024, 9, 0.9722),
        ("llama3", "research"): (1024, 5, 0.9042),
    }
    for seed in range(5):
        for key, want in expected.items():
            cells = fixture_cells(REPORTED_OPTIMA[key], seed=seed)
            top = max(c.mean_similarity for c in cells)
            assert sum(1 for c in cells if c.mean_similarity >= top - 0.001) == 1
            best = select_optimum(cells, 0.001).best
            assert (best.chunk_size, best.top_k, best.mean_similarity) == want

        report = select_optimum(fixture_cells(REPORTED_OPTIMA[("mixtral", "research")], seed=seed), 0.001)
        assert {(c.chunk_size, c.top_k, c.mean_similarity) for c in report.co_optimal} == {
            (128, 3, 0.9018),
            (512, 7, 0.9010),
        }
        assert (report.best.chunk_size, report.best.top_k, report.best.mean_similarity) == (128, 3, 0.9018)
    assert time.perf_counter() - start < 1.0


# 2 ---------------------------------------------------------------------------

def oracle_pack(doc, chunk_size, sentence_counts):
    """Greedy whole-sentence packing checked by recounting chunk text.

    The end of each chunk is guessed from per-sentence counts, then confirmed
    by recounting the candidate text: the chunk must fit and adding the next
    sentence must not. A failed confirmation falls back to a binary search
    over recounts. Returns (sentence_range, recounted tokens) per chunk.
    """
    text, spans = doc.text, doc.sentences
    n = len(spans)

    def count(i, j):
        return count_tokens(text[spans[i][0] : spans[j][1]])

    out, i = [], 0
    while i < n:
        j, total = i, sentence_counts[i]
        while j + 1 < n and total + sentence_counts[j + 1] <= chunk_size:
            j += 1
            total += sentence_counts[j]
        fits = count(i, j)
        if fits > chunk_size and j == i:
            out.append(((i, i), fits))
            i += 1
            continue
        if fits > chunk_size or (j + 1 < n and count(i, j + 1) <= chunk_size):
            lo, hi = i, n  # count(i, lo) fits (or lo == i); hi is the first known miss
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if count(i, mid) <= chunk_size:
                    lo = mid
                else:
                    hi = mid
            j, fits = lo, count(i, lo)
        out.append(((i, j), fits))
        i = j + 1
    return out


@acceptance(2, "chunker partition/budget/monotonicity/oracle on 1000 documents (<30 s)")
def test_2_chunker_suite():
    start = time.perf_counter()
    rng = random.Random(2024)
    vocab = [pseudo_word(rng) for _ in range(4000)]
    violations = []
    for d in range(1000):
        text, n_sentences = generated_document(rng, rng.randint(1, 500), abbrev_rate=0.3, vocab=vocab)
        doc = Document(f"doc{d}", text)
        if len(doc.sentences) != n_sentences:
            violations.append((d, "sentence count"))
        sentence_counts = [count_tokens(text[s:e]) for s, e in doc.sentences]
        n_chunks = []
        for c in SIZES:
            chunks = pack_chunks(doc, c)
            n_chunks.append(len(chunks))
            covered = [i for ch in chunks for i in range(ch.sentence_range[0], ch.sentence_range[1] + 1)]
            if covered != list(range(len(doc.sentences))):
                violations.append((d, c, "partition"))
            expected = oracle_pack(doc, c, sentence_counts)
            if [ch.sentence_range for ch in chunks] != [r for r, _ in expected]:
                violations.append((d, c, "oracle"))
                continue
            for ch, (_, recount) in zip(chunks, expected):
                if ch.token_count != recount:
                    violations.append((d, c, "token_count"))
                if recount > c and not (ch.oversized and ch.sentence_range[0] == ch.sentence_range[1]):
                    violations.append((d, c, "budget"))
        if n_chunks != sorted(n_chunks, reverse=True):
            violations.append((d, "monotonicity"))
    elapsed = time.perf_counter() - start
    assert violations == []
    assert elapsed < 30, f"{elapsed:.1f}s"


# 3 ---------------------------------------------------------------------------

@acceptance(3, "exact top-k equals linear scan incl. tie order (<10 s)")
def test_3_retrieval_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    entries = random_entries(rng, 500, dim=256, duplicates=25)
    index = build_index(entries)
    mismatches = 0
    for qi in range(200):
        # every 10th query is an indexed vector, so exact ties are exercised
        q = entries[qi].vector if qi % 10 == 0 else EmbeddingVector.from_raw(rng.normal(size=256))
        full = brute_force(entries, q, 12)
        for k in range(1, 13):
            if list(index.query_top_k(q, k).hits) != full[:k]:
                mismatches += 1
    assert mismatches == 0
    assert time.perf_counter() - start < 10


# 4 ---------------------------------------------------------------------------

L4, OUT4 = 2048, 64


@pytest.fixture(scope="module")
def hermetic(tmp_path_factory):
    start = time.perf_counter()
    docs, qa = planted_corpus(n_docs=50, facts_per_doc=2, seed=0)
    runs = {}
    for p in (1, 8):
        workdir = tmp_path_factory.mktemp(f"p{p}")
        cfg = SweepConfig(
            profile=ModelProfile("mock-extractive", L4, OUT4),
            llm_provider="mock",
            parallelism=p,
            workdir=workdir,
            archive_prompts=True,
        )
        result = run_sweep(cfg, docs, qa)
        write_sweep(result, workdir)
        emit_all(result, workdir / "report")
        runs[p] = (workdir, result)
    return runs, qa, time.perf_counter() - start


@acceptance(4, "hermetic end-to-end sweep (<60 s)")
def test_4a_overflow_cells_are_sentinel(hermetic):
    runs, qa, _ = hermetic
    workdir, result = runs[1]
    assert len(qa) == 100 and len(result.records) == 100 * 60
    over_budget = {}
    for r in result.records:
        with open(workdir / r.prompt_path, encoding="utf-8", newline="") as fh:
            u = count_tokens(fh.read())
        over_budget.setdefault((r.chunk_size, r.top_k), []).append(u + OUT4 > L4)
    all_over = [key for key, flags in over_budget.items() if all(flags)]
    assert all_over, "grid should contain cells that overflow for every question"
    for key in all_over:
        cell = result.cell(*key)
        assert cell.n_overflow == 100
        assert cell.mean_similarity == 0.5


@acceptance(4, "hermetic end-to-end sweep (<60 s)")
def test_4b_cwu_matches_archived_prompts(hermetic):
    runs, _, _ = hermetic
    workdir, result = runs[1]
    mismatches = 0
    n_ok = 0
    for r in result.records:
        with open(workdir / r.prompt_path, encoding="utf-8", newline="") as fh:
            u = count_tokens(fh.read())
        if r.status == "ok":
            n_ok += 1
            mismatches += (u != r.prompt_tokens) or (r.cwu != u / L4) or (Fraction(r.cwu) != Fraction(u, L4))
        else:
            mismatches += r.status != "overflow" or u + OUT4 <= L4
    assert n_ok > 0 and mismatches == 0


@acceptance(4, "hermetic end-to-end sweep (<60 s)")
def test_4c_parallel_is_byte_identical(hermetic):
    runs, _, elapsed = hermetic
    (w1, r1), (w8, r8) = runs[1], runs[8]
    assert (w1 / "records.jsonl").read_bytes() == (w8 / "records.jsonl").read_bytes()
    for name in sorted(p.name for p in (w1 / "report").iterdir()):
        assert (w1 / "report" / name).read_bytes() == (w8 / "report" / name).read_bytes(), name
    for c in SIZES:
        assert (w1 / "index" / f"{c}.idx").read_bytes() == (w8 / "index" / f"{c}.idx").read_bytes()
    prompts1 = sorted(p.relative_to(w1) for p in (w1 / "prompts").rglob("*.txt"))
    prompts8 = sorted(p.relative_to(w8) for p in (w8 / "prompts").rglob("*.txt"))
    assert prompts1 == prompts8
    assert all((w1 / p).read_bytes() == (w8 / p).read_bytes() for p in prompts1)
    # sweep.json differs only in run metadata (parallelism, timestamps)
    s1, s8 = (json.loads((w / "sweep.json").read_text()) for w in (w1, w8))
    assert s1["cells"] == s8["cells"] and s1["optimum"] == s8["optimum"]
    assert elapsed < 60, f"{elapsed:.1f}s"


# 5 ---------------------------------------------------------------------------

@acceptance(5, "CWU arithmetic at the 7x512 and 5x1024 points")
def test_5_cwu_arithmetic():
    assert abs(cwu(3584, 8192) - 0.4375) <= 1e-12
    assert abs(cwu(5120, 8192) - 0.625) <= 1e-12
    assert Fraction(cwu(3584, 8192)) == Fraction(7 * 512, 8192)
    assert Fraction(cwu(5120, 8192)) == Fraction(5 * 1024, 8192)
    assert 0.40 <= cwu(7 * 512, 8192) <= 0.50
    assert 0.60 <= cwu(5 * 1024, 8192) <= 0.70


# 6 ---------------------------------------------------------------------------

@acceptance(6, "sentinel contract: HTTP 400 -> api_error 0.5; U == L -> overflow, no request")
def test_6a_http_400_is_sentinel():
    docs, qa = planted_corpus(n_docs=4, facts_per_doc=2, filler_sentences=20, seed=6)
    calls = []

    def handler(request):
        body = json.loads(request.content)
        calls.append(body)
        user = body["messages"][1]["content"]
        if "\n\n---\n\n" in user:  # any prompt with two or more chunks is rejected
            return httpx.Response(400, json={"error": {"message": "bad request"}})
        return httpx.Response(200, json={"choices": [{"message": {"content": "I don't know."}}]})

    client = ChatCompletionsClient(backoff=0, client=httpx.Client(transport=httpx.MockTransport(handler)))
    profile = ModelProfile("stub", 8192, 64, endpoint_url="http://stub.invalid/v1")
    cfg = SweepConfig(profile=profile, chunk_sizes=(64,), top_ks=(1, 2, 3))
    result = run_sweep(cfg, docs, qa, llm=client)
    failed = [r for r in result.records if r.top_k > 1]
    assert failed and all(r.status == "api_error" and r.http_status == 400 for r in failed)
    assert all(struct.pack("<d", r.similarity) == struct.pack("<d", 0.5) for r in failed)
    assert all(r.status == "ok" for r in result.records if r.top_k == 1)
    assert len(calls) == len(result.records)  # 4xx is not retried
    assert result.cell(64, 2).mean_similarity == 0.5 and result.cell(64, 2).n_api_error == len(qa)


@acceptance(6, "sentinel contract: HTTP 400 -> api_error 0.5; U == L -> overflow, no request")
def test_6b_full_window_never_sent():
    sent = []

    def handler(request):  # pragma: no cover - reaching it is the failure
        sent.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]})

    class CountingStub:
        calls = 0

        def complete(self, profile, prompt):
            self.calls += 1
            return "x"

    prompt = make_prompt("system", "user " * 100)
    u = prompt.prompt_tokens
    profile = ModelProfile("stub", u, 1, endpoint_url="http://stub.invalid/v1")
    stub = CountingStub()
    assert generate(stub, profile, prompt).status == "context_overflow"
    assert stub.calls == 0
    client = ChatCompletionsClient(backoff=0, client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert generate(client, profile, prompt).status == "context_overflow"
    assert sent == []
    assert assemble_prompt("q", []).prompt_tokens == count_tokens(assemble_prompt("q", []).rendered)


# 7 ---------------------------------------------------------------------------

def independent_aggregate(records_path, context_length):
    """Cell statistics straight from records.jsonl, using only the stdlib."""
    groups = {}
    with open(records_path, encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            groups.setdefault((r["chunk_size"], r["top_k"]), []).append(r)
    cells = {}
    for (c, k), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        cells[(c, k)] = {
            "S": sum(r["similarity"] for r in rs) / len(rs),
            "cwu_ok": sum(r["cwu"] for r in ok) / len(ok) if ok else None,
            "cwu_all": sum(r["cwu"] for r in rs) / len(rs),
            "nominal": c * k / context_length,
            "n_ok": len(ok),
        }
    return cells


def csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def reported_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("report")
    docs, qa = planted_corpus(n_docs=20, facts_per_doc=2, filler_sentences=40, seed=7)
    corpus = root / "corpus"
    corpus.mkdir()
    for d in docs:
        (corpus / d.id).write_text(d.text, encoding="utf-8")
    save_qa(qa, root / "qa.jsonl")
    code = main([
        "sweep", "--corpus", str(corpus), "--qa", str(root / "qa.jsonl"), "--workdir", str(root / "run"),
        "--provider", "mock", "--context-length", "2048", "--max-output-tokens", "64", "--parallelism", "2",
    ])
    assert code == 0
    return root / "run"


@acceptance(7, "report round-trip, well-formed SVG, byte-stable re-rendering")
def test_7a_independent_aggregation(reported_run):
    cells = independent_aggregate(reported_run / "records.jsonl", 2048)
    assert len(cells) == 60
    sweep_cells = {(c["chunk_size"], c["top_k"]): c for c in json.loads((reported_run / "sweep.json").read_text())["cells"]}
    for key, mine in cells.items():
        theirs = sweep_cells[key]
        assert abs(theirs["mean_similarity"] - mine["S"]) <= 1e-9
        if mine["cwu_ok"] is None:
            assert theirs["mean_cwu_actual"] is None
        else:
            assert abs(theirs["mean_cwu_actual"] - mine["cwu_ok"]) <= 1e-9

    heat = csv_rows(reported_run / "report" / "heatmap.csv")
    ks = [int(h.removeprefix("k=")) for h in heat[0][1:]]
    for row in heat[1:]:
        for k, text in zip(ks, row[1:]):
            assert text == f"{cells[(int(row[0]), k)]['S']:.4f}"

    for row in csv_rows(reported_run / "report" / "cwu_scatter.csv")[1:]:
        mine = cells[(int(row[0]), int(row[1]))]
        assert (row[2] == "") == (mine["cwu_ok"] is None)
        if row[2]:
            assert abs(float(row[2]) - mine["cwu_ok"]) <= 1e-9
        assert abs(float(row[3]) - mine["S"]) <= 1e-9
        assert abs(float(row[4]) - mine["cwu_all"]) <= 1e-9
        assert abs(float(row[5]) - mine["nominal"]) <= 1e-9
        assert int(row[6]) == mine["n_ok"]

    topk = csv_rows(reported_run / "report" / "topk.csv")
    assert [int(r[0]) for r in topk[1:]] == list(range(1, 13))
    for row in topk[1:]:
        k = int(row[0])
        column = sorted((c, v) for (c, kk), v in cells.items() if kk == k)
        best = max(v["S"] for _, v in column)
        c_best, v_best = next((c, v) for c, v in column if v["S"] == best)
        assert row[1] == f"{best:.4f}" and int(row[2]) == c_best
        pct = v_best["cwu_ok"]
        assert row[3] == ("" if pct is None else f"{100 * pct:.1f}")
        if pct is not None:
            assert abs(float(row[3]) - 100 * pct) <= 0.05 + 1e-9


@acceptance(7, "report round-trip, well-formed SVG, byte-stable re-rendering")
def test_7b_svg_and_stability(reported_run):
    root = ET.parse(reported_run / "report" / "heatmap.svg").getroot()
    rects = [e for e in root.iter("{http://www.w3.org/2000/svg}rect") if e.get("class") == "cell"]
    assert len(rects) == 60
    assert len({(r.get("data-chunk-size"), r.get("data-top-k")) for r in rects}) == 60

    report = reported_run / "report"
    snapshots = []
    for _ in range(2):
        assert main(["report", "--workdir", str(reported_run)]) == 0
        snapshots.append({p.name: p.read_bytes() for p in sorted(report.iterdir())})
    assert snapshots[0] == snapshots[1]
    assert not math.isnan(float(csv_rows(report / "heatmap.csv")[1][1]))
