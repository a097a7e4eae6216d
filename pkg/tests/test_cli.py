from __future__ import annotations

import json
import os
import re
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from uniparse.cli import main
from uniparse.corpus import CorpusSpec, gen_corpus
from uniparse.docmodel import save_document


@pytest.fixture()
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    assert main(["gen-corpus", "--out", str(out), "--docs", "3", "--seed", "5"]) == 0
    return out


def test_help_exits_zero_for_every_subcommand(capsys):
    for cmd in ("parse", "simulate", "bench", "gen-corpus", "eval", "serve-echo"):
        assert main([cmd, "--help"]) == 0
        assert cmd in capsys.readouterr().out
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_usage_error_exits_64(capsys):
    assert main(["parse"]) == 64  # missing input
    assert main(["frobnicate"]) == 64  # unknown subcommand
    assert main(["simulate", "--mode", "warp"]) == 64
    capsys.readouterr()


def test_missing_input_exits_1(tmp_path, capsys):
    assert main(["parse", str(tmp_path / "missing.ir.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_parse_markdown_to_file(corpus_dir, tmp_path, capsys):
    out = tmp_path / "d000.md"
    code = main(["parse", str(corpus_dir / "d000.ir.json"), "--format", "markdown",
                 "--out", str(out)])
    assert code == 0
    assert out.exists() and out.read_text(encoding="utf-8").strip()
    capsys.readouterr()


def test_parse_structured_stdout(corpus_dir, capsys):
    assert main(["parse", str(corpus_dir / "d000.ir.json")]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["doc_id"] == "d000"


def test_parse_emit_order_lines(corpus_dir, capsys):
    assert main(["parse", str(corpus_dir / "d000.ir.json"), "--emit", "order"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# page 0")
    assert re.search(r"^d000p0b\d+$", out, re.MULTILINE)


def test_parse_emit_layout(corpus_dir, capsys):
    assert main(["parse", str(corpus_dir / "d000.ir.json"), "--emit", "layout"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert "pages" in data and data["pages"][0]["roots"]


def test_only_modality_leaves_other_payloads_unresolved(corpus_dir, tmp_path, capsys):
    out = tmp_path / "dump.json"
    # pick a doc that contains at least one molecule
    chosen = None
    for ir in sorted(corpus_dir.glob("*.ir.json")):
        if '"molecule"' in ir.read_text(encoding="utf-8"):
            chosen = ir
            break
    assert chosen is not None
    assert main(["parse", str(chosen), "--only-modality", "ocsr", "--out", str(out)]) == 0
    data = json.loads(out.read_text(encoding="utf-8"))

    payloads = {}

    def walk(section):
        for it in section["body"]:
            payloads[it["id"]] = (it["category"], it["payload"])
            for p in it["partners"]:
                payloads[p["id"]] = (p["category"], p["payload"])
        for child in section["children"]:
            walk(child)

    walk(data["root"])
    kinds = {cat for cat, payload in payloads.values() if payload is not None}
    assert kinds <= {"molecule"}
    capsys.readouterr()


def test_gen_corpus_eval_roundtrip(corpus_dir, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for ir in sorted(corpus_dir.glob("*.ir.json")):
        doc_id = ir.name[: -len(".ir.json")]
        assert main(["parse", str(ir), "--emit", "order",
                     "--out", str(pred / f"{doc_id}.pred.json")]) == 0
    assert main(["eval", "--pred", str(pred), "--truth", str(corpus_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mean_order_edit_distance"] == 0.0
    assert report["grouping"]["f1"] == 1.0


def test_eval_missing_prediction_exits_1(corpus_dir, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--pred", str(empty), "--truth", str(corpus_dir)]) == 1
    capsys.readouterr()


def test_simulate_deterministic(capsys):
    args = ["simulate", "--mode", "pipe", "--workers", "4", "--seed", "1", "--docs", "5",
            "--report", "json"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    second = capsys.readouterr().out
    assert first == second
    assert "throughput_pps" in json.loads(first)


def test_simulate_scaling_report(capsys):
    assert main(["simulate", "--docs", "6", "--seed", "2", "--scaling", "1,2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert [p["workers"] for p in report["points"]] == [1, 2]
    assert "r_squared" in report


def test_bench_compare_modes_table(capsys):
    assert main(["bench", "--docs", "6", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    rows = [line for line in out.splitlines() if re.match(r"\s*(seq|par|pipe)\b", line)]
    assert len(rows) == 3


def test_unknown_config_key_exits_1(tmp_path, corpus_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"min_gap": 0.02, "bogus_key": 1}', encoding="utf-8")
    assert main(["parse", str(corpus_dir / "d000.ir.json"), "--config", str(cfg)]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_config_env_var_fallback(tmp_path, corpus_dir, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"max_batch": 4}', encoding="utf-8")
    monkeypatch.setenv("UNIPARSE_CONFIG", str(cfg))
    assert main(["parse", str(corpus_dir / "d000.ir.json")]) == 0
    capsys.readouterr()


def test_serve_echo_subprocess_round_trip(corpus_dir):
    proc = subprocess.Popen(
        [sys.executable, "-m", "uniparse.cli", "serve-echo", "--port", "0",
         "--ir", str(corpus_dir)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        line = proc.stdout.readline()
        match = re.search(r"on (http://[\d.]+:\d+)", line)
        assert match, line
        endpoint = match.group(1)
        from uniparse.docmodel import load_document
        from uniparse.engine import MockBackend, RemoteBackend, process_document
        from uniparse.experts import DocumentStore
        from uniparse.formats import to_structured

        doc = load_document(corpus_dir / "d000.ir.json")
        docs = [load_document(p) for p in sorted(corpus_dir.glob("*.ir.json"))]
        remote = process_document(doc, backend=RemoteBackend(endpoint))
        local = process_document(doc, backend=MockBackend(DocumentStore(docs)))
        assert to_structured(remote.parsed) == to_structured(local.parsed)
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
