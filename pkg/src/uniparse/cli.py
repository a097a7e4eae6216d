"""Command-line entry point: parse, simulate, bench, gen-corpus, eval,
serve-echo.

Exit codes: 0 success, 1 operational error, 2 strict-mode failures,
64 usage errors. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .config import ENV_CONFIG_VAR, EngineConfig, UnknownConfigKey
from .docmodel import (
    DocumentIR,
    SchemaViolation,
    canonical_json,
    load_document,
    save_document,
)
from .engine import MockBackend, RemoteBackend, StrictModeFailure, process_document
from .experts import DocumentStore, ExpertError, default_descriptors
from .formats import chunk, chunks_to_jsonl, to_html, to_markdown, to_structured
from .layout import group_pairs, tree_to_dict
from .runtime import (
    Mode,
    PipelineConfig,
    bubble_report,
    compare_modes,
    run_pipeline,
    simulate_scaling,
)

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="uniparse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", help="parse IR documents into structured output")
    p.add_argument("inputs", nargs="+", help="IR file(s)")
    p.add_argument("--format", dest="fmt", default="structured",
                   choices=("structured", "markdown", "html", "chunks"))
    p.add_argument("--emit", choices=("layout", "order"), default=None,
                   help="emit intermediate layout trees or reading order instead")
    p.add_argument("--out", default=None,
                   help="output file (or directory with several inputs)")
    p.add_argument("--only-modality", default=None,
                   help="restrict parsing to one modality; others become stubs")
    p.add_argument("--expert-endpoint", default=None,
                   help="base URL of a remote expert service (default: mocks)")
    p.add_argument("--max-tokens", type=int, default=512, help="chunk budget")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help=f"config file (or ${ENV_CONFIG_VAR})")

    s = sub.add_parser("simulate", help="run the pipeline simulator on a synthetic workload")
    s.add_argument("--mode", choices=("seq", "par", "pipe"), default="pipe")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--docs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scaling", default=None,
                   help="comma-separated worker counts, e.g. 1,2,4,8")
    s.add_argument("--report", choices=("json", "text"), default="json")
    s.add_argument("--config", default=None)

    b = sub.add_parser("bench", help="compare the three pipeline modes")
    b.add_argument("--compare-modes", action="store_true", default=True)
    b.add_argument("--docs", type=int, default=50)
    b.add_argument("--workers", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", choices=("json", "text"), default="text")
    b.add_argument("--config", default=None)

    g = sub.add_parser("gen-corpus", help="generate a synthetic IR corpus with ground truth")
    g.add_argument("--spec", default=None, help="corpus spec JSON file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--docs", type=int, default=10)
    g.add_argument("--pages-min", type=int, default=1)
    g.add_argument("--pages-max", type=int, default=3)
    g.add_argument("--columns", type=int, default=2)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--merge-prob", type=float, default=0.0)
    g.add_argument("--substitution-prob", type=float, default=0.0)
    g.add_argument("--split-prob", type=float, default=0.0)
    g.add_argument("--no-hints", action="store_true")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="directory of *.pred.json files")
    e.add_argument("--truth", required=True, help="directory of *.truth.json files")
    e.add_argument("--report", choices=("json", "text"), default="json")

    v = sub.add_parser("serve-echo", help="serve the expert wire schema from mock experts")
    v.add_argument("--port", type=int, default=0)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--ir", nargs="+", required=True, help="IR files or directories")

    return parser


def _load_config(path: str | None) -> EngineConfig:
    return EngineConfig.from_env_or_default(path)


def _workload(seed: int, n_docs: int) -> list[DocumentIR]:
    spec = corpus_mod.CorpusSpec(seed=seed, n_docs=n_docs, pages_min=1, pages_max=3)
    docs, _truth = corpus_mod.gen_corpus(spec)
    return docs


def _emit_order_record(doc: DocumentIR, cfg: EngineConfig) -> dict:
    from .engine import analyze_pages

    analyses = analyze_pages(doc, cfg)
    pages = []
    for analysis in analyses:
        pages.append(
            {
                "page_index": analysis.tree.page_index,
                "order": [u.unit_id for u in analysis.units],
                "groups": sorted(sorted(pair) for pair in group_pairs(analysis.tree)),
            }
        )
    return {"doc_id": doc.doc_id, "pages": pages}


def cmd_parse(args) -> int:
    cfg = _load_config(args.config)
    multi = len(args.inputs) > 1
    out_dir: Path | None = None
    if multi:
        if not args.out:
            print("parse: --out directory required with several inputs", file=sys.stderr)
            return USAGE_EXIT
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)

    exit_code = 0
    for input_path in args.inputs:
        doc = load_document(input_path)
        if args.emit == "layout":
            from .engine import analyze_pages

            payload = canonical_json(
                {"doc_id": doc.doc_id,
                 "pages": [tree_to_dict(a.tree) for a in analyze_pages(doc, cfg)]}
            )
            _write_output(payload, args, out_dir, doc.doc_id, "layout.json")
            continue
        if args.emit == "order":
            record = _emit_order_record(doc, cfg)
            if args.out:
                _write_output(canonical_json(record), args, out_dir, doc.doc_id, "pred.json")
            else:
                for page in record["pages"]:
                    print(f"# page {page['page_index']}")
                    for unit_id in page["order"]:
                        print(unit_id)
            continue

        if args.expert_endpoint:
            backend = RemoteBackend(args.expert_endpoint)
        else:
            backend = MockBackend(
                DocumentStore([doc]), default_descriptors(max_batch=cfg.max_batch, seed=args.seed)
            )
        try:
            result = process_document(
                doc, cfg, backend, only_modality=args.only_modality, strict=args.strict
            )
        except StrictModeFailure as exc:
            print(f"strict mode: {exc}", file=sys.stderr)
            exit_code = 2
            continue
        parsed = result.parsed
        if args.fmt == "structured":
            payload, ext = to_structured(parsed), "structured.json"
        elif args.fmt == "markdown":
            payload, ext = to_markdown(parsed), "md"
        elif args.fmt == "html":
            payload, ext = to_html(parsed), "html"
        else:
            payload, ext = chunks_to_jsonl(chunk(parsed, args.max_tokens)), "chunks.jsonl"
        _write_output(payload, args, out_dir, doc.doc_id, ext)
    return exit_code


def _write_output(payload: str, args, out_dir: Path | None, doc_id: str, ext: str) -> None:
    if out_dir is not None:
        (out_dir / f"{doc_id}.{ext}").write_text(payload, encoding="utf-8")
    elif args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config).copy(workers=args.workers)
    docs = _workload(args.seed, args.docs)
    mode = {"seq": Mode.SEQUENTIAL, "par": Mode.PARALLEL_GATHER, "pipe": Mode.PIPELINE_PARALLEL}[
        args.mode
    ]
    config = PipelineConfig(mode=mode, engine=cfg, seed=args.seed)
    if args.scaling:
        counts = [int(x) for x in args.scaling.split(",")]
        from .runtime import contention_free_config

        scaling_cfg = contention_free_config(seed=args.seed, max_workers=max(counts), engine=cfg)
        report = simulate_scaling(docs, counts, scaling_cfg).to_report()
    else:
        _outputs, metrics = run_pipeline(docs, config)
        report = metrics.to_report()
    if args.report == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        _print_flat(report)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config).copy(workers=args.workers)
    docs = _workload(args.seed, args.docs)
    config = PipelineConfig(engine=cfg, seed=args.seed)
    comparison = compare_modes(docs, config)
    if args.report == "json":
        print(json.dumps(comparison, indent=2, sort_keys=True))
        return 0
    print(f"{'mode':>6} {'wall_ms':>12} {'pages/s':>10} {'expert bubble':>14}")
    for row in comparison["modes"]:
        print(
            f"{row['mode']:>6} {row['wall_ms']:>12.1f} {row['throughput_pps']:>10.2f} "
            f"{row['expert_bubble_fraction']:>14.3f}"
        )
    return 0


def cmd_gen_corpus(args) -> int:
    if args.spec:
        spec = corpus_mod.CorpusSpec.from_dict(
            json.loads(Path(args.spec).read_text(encoding="utf-8"))
        )
    else:
        spec = corpus_mod.CorpusSpec(
            seed=args.seed,
            n_docs=args.docs,
            pages_min=args.pages_min,
            pages_max=args.pages_max,
            columns=args.columns,
            jitter_sigma=args.jitter,
            merge_prob=args.merge_prob,
            substitution_prob=args.substitution_prob,
            cross_page_split_prob=args.split_prob,
            with_hints=not args.no_hints,
        )
    docs, truth = corpus_mod.gen_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth_dict = truth.to_dict()
    for doc in docs:
        save_document(doc, out / f"{doc.doc_id}.ir.json")
        (out / f"{doc.doc_id}.truth.json").write_text(
            canonical_json(truth_dict[doc.doc_id]), encoding="utf-8"
        )
    print(f"wrote {len(docs)} document(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    distances: list[float] = []
    pred_pairs: set = set()
    truth_pairs: set = set()
    docs = 0
    for truth_path in sorted(truth_dir.glob("*.truth.json")):
        doc_id = truth_path.name[: -len(".truth.json")]
        pred_path = pred_dir / f"{doc_id}.pred.json"
        if not pred_path.exists():
            print(f"eval: missing prediction for {doc_id}", file=sys.stderr)
            return 1
        truth = json.loads(truth_path.read_text(encoding="utf-8"))
        pred = json.loads(pred_path.read_text(encoding="utf-8"))
        docs += 1
        pred_pages = {p["page_index"]: p for p in pred["pages"]}
        for page in truth["pages"]:
            pred_page = pred_pages.get(page["page_index"], {"order": [], "groups": []})
            distances.append(
                corpus_mod.order_edit_distance(pred_page["order"], page["order"])
            )
            truth_pairs.update(frozenset(g) for g in page["groups"])
            pred_pairs.update(frozenset(g) for g in pred_page["groups"])
    precision, recall, f1 = corpus_mod.grouping_f1(pred_pairs, truth_pairs)
    report = {
        "docs": docs,
        "pages": len(distances),
        "mean_order_edit_distance": (
            round(sum(distances) / len(distances), 6) if distances else 0.0
        ),
        "grouping": {
            "precision": round(precision, 6),
            "recall": round(recall, 6),
            "f1": round(f1, 6),
        },
    }
    if args.report == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        _print_flat(report)
    return 0


def cmd_serve_echo(args) -> int:
    from .server import make_echo_server

    paths: list[Path] = []
    for raw in args.ir:
        p = Path(raw)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.ir.json")))
        else:
            paths.append(p)
    docs = [load_document(p) for p in paths]
    server = make_echo_server(docs, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"serving {len(docs)} document(s) on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _print_flat(report: dict, prefix: str = "") -> None:
    for key in sorted(report):
        value = report[key]
        if isinstance(value, dict):
            _print_flat(value, f"{prefix}{key}.")
        elif isinstance(value, list):
            print(f"{prefix}{key} = {json.dumps(value)}")
        else:
            print(f"{prefix}{key} = {value}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    handlers = {
        "parse": cmd_parse,
        "simulate": cmd_simulate,
        "bench": cmd_bench,
        "gen-corpus": cmd_gen_corpus,
        "eval": cmd_eval,
        "serve-echo": cmd_serve_echo,
    }
    try:
        return handlers[args.command](args)
    except StrictModeFailure as exc:
        print(f"uniparse: strict mode: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, SchemaViolation, UnknownConfigKey, corpus_mod.InvalidSpec,
            ExpertError, ValueError, OSError) as exc:
        print(f"uniparse: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
