"""Command-line entry point: issuesupport {fetch|curate|sample|merge|index|run|evaluate|report}."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import httpx

from . import curation
from .config import RunConfig, load_config
from .errors import ConfigError, IssueSupportError
from .evaluation import EvaluationReport, ReportFormat, TieRule, emit_report
from .ingest import IssueSourceConfig, IssueTrackerClient, fetch_closed_issues, invalid_label_set, is_invalid_by_labels, load_corpus, save_corpus
from .models import BenchmarkRecord, decode, parse_timestamp
from .prompting import PipelineMode, parse_mode
from .retrieval import Corpus, CorpusDoc, index_corpus, report_to_doc, wiki_docs
from .runner import (
    Pipeline,
    evaluate_predictions,
    index_dir,
    judge_from_gateway,
    load_predictions,
    load_retriever,
    make_embedder,
    make_gateway,
    make_search_tools,
    make_token_embedder,
    provenance_block,
    results_dir,
    run_pipeline,
)
from .storage import iter_jsonl, read_json, write_json, write_jsonl

log = logging.getLogger("issuesupport")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_ERROR = 3


class _Context:
    """Per-invocation dependencies; tests swap in mock transports/providers."""

    def __init__(self, cfg: RunConfig, http_client: httpx.Client | None, provider: Any):
        self.cfg = cfg
        self.http_client = http_client
        self.provider = provider


def _print(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, sort_keys=True))


def load_benchmark(path: str | Path) -> list[BenchmarkRecord]:
    p = Path(path)
    if not p.exists():
        raise ConfigError("paths.benchmark", f"file not found: {p}")
    return [decode(BenchmarkRecord, o, n) for n, o in iter_jsonl(p)]


def cmd_fetch(args: argparse.Namespace, ctx: _Context) -> int:
    s = ctx.cfg.source
    src = IssueSourceConfig.from_env(
        s.repo_owner, s.repo_name, api_base_url=s.api_base_url, page_size=s.page_size, parallelism=s.parallelism
    )
    client = IssueTrackerClient(src, http=ctx.http_client)
    try:
        n = save_corpus(fetch_closed_issues(src, parse_timestamp(s.snapshot_at), client=client), ctx.cfg.paths.corpus)
    finally:
        client.close()
    _print({"command": "fetch", "reports": n, "list_calls": client.list_calls, "output": ctx.cfg.paths.corpus})
    return EXIT_OK


def cmd_curate(args: argparse.Namespace, ctx: _Context) -> int:
    c = ctx.cfg.curation
    reports = load_corpus(ctx.cfg.paths.corpus)
    invalid = [r for r in reports if is_invalid_by_labels(r, invalid_label_set(c.invalid_labels))]
    ccfg = curation.CurationConfig(
        excluded_labels=frozenset(c.excluded_labels), date_cutoff=parse_timestamp(c.date_cutoff)
    )
    kept = curation.apply_exclusion_filters(invalid, ccfg)
    recent = curation.apply_date_cutoff(kept, ccfg.date_cutoff)
    write_jsonl(ctx.cfg.paths.curated, (r.to_dict() for r in recent))
    _print(
        {
            "command": "curate",
            "closed": len(reports),
            "invalid": len(invalid),
            "after_exclusion": len(kept),
            "after_date_cutoff": len(recent),
            "output": ctx.cfg.paths.curated,
        }
    )
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, ctx: _Context) -> int:
    c = ctx.cfg.curation
    pool = load_corpus(ctx.cfg.paths.curated)
    if not pool:
        raise ConfigError("paths.curated", "curated set is empty")
    n = args.size if args.size is not None else curation.cochran_sample_size(len(pool), c.confidence, c.margin)
    sample = curation.random_sample(pool, n, ctx.cfg.seed)
    write_jsonl(ctx.cfg.paths.sample, (r.to_dict() for r in sample))
    plan = curation.assign_annotator_pairs([r.id for r in sample], c.annotators)
    write_json(
        ctx.cfg.paths.plan,
        {str(rid): {"primary_a": p.primary_a, "primary_b": p.primary_b, "adjudicator": p.adjudicator} for rid, p in plan.items()},
    )
    _print({"command": "sample", "population": len(pool), "sample": n, "seed": ctx.cfg.seed, "output": ctx.cfg.paths.sample})
    return EXIT_OK


def cmd_merge(args: argparse.Namespace, ctx: _Context) -> int:
    reports = load_corpus(ctx.cfg.paths.sample)
    raw_plan = read_json(ctx.cfg.paths.plan)
    plan = {int(k): curation.PairAssignment(**v) for k, v in raw_plan.items()}
    annotations = [curation.AnnotationRecord.from_dict(o) for _, o in iter_jsonl(Path(ctx.cfg.paths.annotations))]
    gold, stats = curation.merge_all(annotations, plan)
    bench = curation.build_benchmark(reports, gold)
    write_jsonl(ctx.cfg.paths.benchmark, (b.to_dict() for b in bench))
    write_json(ctx.cfg.paths.agreement, stats.to_dict())
    _print(
        {
            "command": "merge",
            "records": len(bench),
            "taxonomy_records": sum(b.is_taxonomy for b in bench),
            **stats.to_dict(),
        }
    )
    return EXIT_OK


def cmd_index(args: argparse.Namespace, ctx: _Context) -> int:
    r = ctx.cfg.retrieval
    corpus = Corpus.HISTORICAL_ISSUES if args.corpus == "issues" else Corpus.WIKI_DOCS
    rows = [o for _, o in iter_jsonl(Path(args.input))]
    if corpus is Corpus.HISTORICAL_ISSUES:
        docs = [report_to_doc(rep) for rep in load_corpus(args.input)]
    elif rows and "doc_id" in rows[0]:
        docs = [CorpusDoc.from_dict(o) for o in rows]
    else:
        docs = wiki_docs({o["title"]: o["text"] for o in rows})
    index = index_corpus(docs, make_embedder(r.embedder, r.embed_dimension))
    out = index_dir(ctx.cfg, corpus)
    index.save(out)
    _print({"command": "index", "corpus": corpus.value, "docs": len(index), "dimension": index.dimension, "output": str(out)})
    return EXIT_OK


def cmd_run(args: argparse.Namespace, ctx: _Context) -> int:
    cfg = ctx.cfg
    records = [b for b in load_benchmark(cfg.paths.benchmark) if b.is_taxonomy]
    gateway = make_gateway(cfg, provider=ctx.provider, http=ctx.http_client)
    kwargs: dict[str, Any] = {}
    if cfg.mode is PipelineMode.RAG:
        kwargs["retriever"] = load_retriever(cfg)
    if cfg.mode is PipelineMode.AGENTIC_SEARCH:
        search_client, fetcher = make_search_tools(cfg)
        kwargs.update(search_client=search_client, fetcher=fetcher, budget=cfg.budget, traces_dir=cfg.paths.traces)
    pipeline = Pipeline(cfg.mode, gateway, **kwargs)
    out = results_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance_block(cfg, gateway)
    summary = run_pipeline(pipeline, records, cfg.n_runs, out / "runs.jsonl", provenance=prov, workers=cfg.workers)
    with (out / "requests.jsonl").open("a", encoding="utf-8") as fh:
        for rec in gateway.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    # File locations are left out so identical experiments produce identical metadata anywhere.
    config = {k: v for k, v in cfg.to_dict().items() if k != "paths"}
    write_json(out / "run_meta.json", {"provenance": prov, "config": config})
    _print({"command": "run", **summary.to_dict(), "output": str(out / "runs.jsonl")})
    if summary.failed:
        _error("PartialFailure", f"{len(summary.failed)} report(s) failed", failed_report_ids=sorted(summary.failed))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, ctx: _Context) -> int:
    cfg = ctx.cfg
    out = results_dir(cfg)
    runs_path = out / "runs.jsonl"
    if not runs_path.exists():
        raise ConfigError("paths.results", f"no runs found at {runs_path}; run the run command first")
    records = load_benchmark(cfg.paths.benchmark)
    judge_cfg = RunConfig(**{**cfg.__dict__, "model_id": cfg.evaluation.judge_model or cfg.model_id})
    gateway = make_gateway(judge_cfg, provider=ctx.provider, http=ctx.http_client)
    prov = provenance_block(cfg, gateway)
    report = evaluate_predictions(
        records,
        load_predictions(runs_path),
        cfg.mode,
        judge=judge_from_gateway(gateway),
        token_embedder=make_token_embedder(cfg.evaluation.bertscore_embedder),
        verdicts_path=out / "verdicts.jsonl",
        pipeline_label=f"{cfg.mode.value}:{cfg.model_id}",
        tie_rule=TieRule(cfg.evaluation.tie_rule),
        per_report_majority=cfg.evaluation.per_report_majority,
        provenance=prov,
    )
    write_json(out / "evaluation.json", report.to_dict())
    _print(
        {
            "command": "evaluate",
            "weighted_f1": report.overall_weighted_f1,
            "judge_rate": report.overall_judge_rate,
            "bertscore_f1": report.overall_bertscore_f1,
            "output": str(out / "evaluation.json"),
        }
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace, ctx: _Context) -> int:
    cfg = ctx.cfg
    targets: list[tuple[PipelineMode, str]] = []
    for target in args.pipelines or [f"{cfg.mode.value}:{cfg.model_id}"]:
        mode, _, model = target.partition(":")
        targets.append((parse_mode(mode), model or cfg.model_id))
    reports = []
    for mode, model in targets:
        path = results_dir(cfg, mode, model) / "evaluation.json"
        if not path.exists():
            raise ConfigError("paths.results", f"no evaluation at {path}; run the evaluate command first")
        reports.append(EvaluationReport.from_dict(read_json(path)))
    out = Path(args.out) if args.out else results_dir(cfg, *targets[0])
    formats = [ReportFormat(f) for f in args.format] if args.format else list(ReportFormat)
    written = emit_report(reports, out, formats)
    _print({"command": "report", "files": [str(p) for p in written]})
    return EXIT_OK


def _error(kind: str, message: str, **extra: Any) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--mode", help="vanilla | without_priors | rag | agentic_search")
    common.add_argument("--model", help="model id, or 'mock' for the offline stand-in")
    common.add_argument("--seed", type=int)
    common.add_argument("--runs", type=int, help="independent runs per report")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="issuesupport", description="Invalid bug report triage experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fetch", parents=[common], help="mine closed issues into the corpus file")
    sub.add_parser("curate", parents=[common], help="keep invalid reports after label and date filters")
    sp = sub.add_parser("sample", parents=[common], help="draw the annotation sample and pair plan")
    sp.add_argument("--size", type=int, help="override the computed sample size")
    sub.add_parser("merge", parents=[common], help="merge annotations into the benchmark and report agreement")
    ip = sub.add_parser("index", parents=[common], help="embed a corpus into a vector index")
    ip.add_argument("--corpus", choices=["issues", "wiki"], required=True)
    ip.add_argument("--input", required=True)
    sub.add_parser("run", parents=[common], help="run a pipeline over the benchmark")
    sub.add_parser("evaluate", parents=[common], help="score a finished run")
    rp = sub.add_parser("report", parents=[common], help="emit result tables")
    rp.add_argument("--pipelines", nargs="*", help="mode:model pairs to put side by side")
    rp.add_argument("--format", nargs="*", choices=[f.value for f in ReportFormat])
    rp.add_argument("--out", help="output directory")
    return p


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.mode:
        try:
            cfg.mode = parse_mode(args.mode)
        except ValueError:
            raise ConfigError("--mode", f"unknown pipeline mode {args.mode!r}") from None
    if args.model:
        cfg.model_id = args.model
    if args.seed is not None:
        cfg.seed = args.seed
    if args.runs is not None:
        cfg.n_runs = args.runs
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()
    return cfg


COMMANDS = {
    "fetch": cmd_fetch,
    "curate": cmd_curate,
    "sample": cmd_sample,
    "merge": cmd_merge,
    "index": cmd_index,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None, *, http_client: httpx.Client | None = None, provider: Any = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config_path = args.config or (os.environ.get("ISSUESUPPORT_CONFIG") or None)
        cfg = _apply_overrides(load_config(config_path), args)
        return COMMANDS[args.command](args, _Context(cfg, http_client, provider))
    except ConfigError as exc:
        _error("ConfigError", str(exc), field=exc.field_path)
        return EXIT_CONFIG
    except IssueSupportError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_ERROR
    except OSError as exc:
        _error("IoError", str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
