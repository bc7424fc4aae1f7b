"""Batch execution of a pipeline over the benchmark, with checkpoints, plus its evaluation."""

from __future__ import annotations

import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .agent import (
    AgentBudget,
    Cassette,
    CassetteFetcher,
    CassetteSearchClient,
    Fetcher,
    HttpFetcher,
    SearchClient,
    SearchResult,
    SerperClient,
    SEARCH_KEY_ENV,
    gateway_orchestrator,
    gateway_summarizer,
    run_agent,
)
from .config import RunConfig
from .errors import (
    BudgetExceeded,
    ConfigError,
    LeakageError,
    OrchestratorError,
    ProviderError,
)
from .evaluation import (
    HashingTokenEmbedder,
    JudgeCall,
    JudgeVerdict,
    OneHotTokenEmbedder,
    TieRule,
    TokenEmbedder,
    TransformersTokenEmbedder,
    EvaluationReport,
    bertscore_f1,
    build_report,
    judge_fix,
    majority_vote,
    pick_successful_reference,
)
from .llm import API_KEY_ENV, Gateway, Role, default_role_params, provider_for, RetryPolicy, TokenBudget
from .models import BenchmarkRecord, RetrievedContext
from .prompting import (
    PipelineMode,
    PredictionRecord,
    build_system_prompt,
    build_user_prompt,
    check_no_leakage,
    template_hash,
    to_prediction,
)
from .ratelimit import RateLimiter
from .retrieval import (
    Corpus,
    Embedder,
    HashingEmbedder,
    HttpEmbedder,
    HttpReranker,
    IdentityReranker,
    LexicalOverlapReranker,
    RagRetriever,
    Reranker,
    VectorIndex,
)
from .storage import append_jsonl, iter_jsonl, read_json, write_json

log = logging.getLogger(__name__)


def safe_name(model_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "__", model_id)


def results_dir(cfg: RunConfig, mode: PipelineMode | None = None, model_id: str | None = None) -> Path:
    return Path(cfg.paths.results) / (mode or cfg.mode).value / safe_name(model_id or cfg.model_id)


def make_embedder(choice: str, dimension: int) -> Embedder:
    if choice == "hashing":
        return HashingEmbedder(dimension)
    if choice.startswith("http:"):
        return HttpEmbedder(choice[5:], dimension)
    raise ConfigError("retrieval.embedder", f"unknown embedder {choice!r}")


def make_reranker(choice: str) -> Reranker:
    if choice == "lexical":
        return LexicalOverlapReranker()
    if choice == "identity":
        return IdentityReranker()
    if choice.startswith("http:"):
        return HttpReranker(choice[5:])
    raise ConfigError("retrieval.reranker", f"unknown reranker {choice!r}")


def make_token_embedder(choice: str) -> TokenEmbedder:
    if choice == "hashing":
        return HashingTokenEmbedder()
    if choice == "onehot":
        return OneHotTokenEmbedder()
    if choice.startswith("transformers:"):
        return TransformersTokenEmbedder(choice.split(":", 1)[1])
    raise ConfigError("evaluation.bertscore_embedder", f"unknown token embedder {choice!r}")


def index_dir(cfg: RunConfig, corpus: Corpus) -> Path:
    return Path(cfg.paths.index) / corpus.value


def make_gateway(cfg: RunConfig, *, provider=None, mode: PipelineMode | None = None, http=None) -> Gateway:
    mode = mode or cfg.mode
    if provider is None:
        if cfg.model_id != "mock" and not os.environ.get(API_KEY_ENV):
            raise ConfigError(f"env.{API_KEY_ENV}", "required for remote models")
        provider = provider_for(cfg.model_id, http=http) if cfg.model_id != "mock" else provider_for("mock")
    roles = default_role_params(
        cfg.model_id,
        helper_model_id=cfg.helper_model,
        judge_model_id=cfg.evaluation.judge_model,
        classifier_temperature=0.2 if mode is PipelineMode.AGENTIC_SEARCH else None,
    )
    roles = {r: type(p)(p.role, p.model_id, p.temperature, cfg.max_tokens) for r, p in roles.items()}
    limiter = RateLimiter(per_minute=cfg.rate_limit, max_in_flight=max(cfg.workers, 1))
    return Gateway(provider, roles, retry=RetryPolicy(), budget=TokenBudget(cfg.max_total_tokens), limiter=limiter)


class _NoSearch:
    def search(self, query: str) -> list[SearchResult]:
        return []


def make_search_tools(cfg: RunConfig) -> tuple[SearchClient, Fetcher | None]:
    live = bool(os.environ.get(SEARCH_KEY_ENV))
    if cfg.paths.cassette:
        cassette = Cassette(cfg.paths.cassette, "record" if live else "replay")
        return (
            CassetteSearchClient(cassette, SerperClient() if live else None),
            CassetteFetcher(cassette, HttpFetcher() if live else None),
        )
    if live:
        return SerperClient(), HttpFetcher()
    if cfg.model_id == "mock":
        return _NoSearch(), None
    raise ConfigError(f"env.{SEARCH_KEY_ENV}", "required for agentic search (or configure paths.cassette)")


def load_retriever(cfg: RunConfig) -> RagRetriever:
    indexes = [VectorIndex.load(index_dir(cfg, c)) for c in Corpus if (index_dir(cfg, c) / "header.json").exists()]
    if not indexes:
        raise ConfigError("paths.index", f"no index found under {cfg.paths.index}; run the index command first")
    r = cfg.retrieval
    return RagRetriever(
        indexes, make_embedder(r.embedder, r.embed_dimension), make_reranker(r.reranker), r.k_retrieve, r.k_rerank, r.per_corpus
    )


class Pipeline:
    """One pipeline mode bound to a gateway and, where needed, retrieval or search tools."""

    def __init__(
        self,
        mode: PipelineMode,
        gateway: Gateway,
        *,
        retriever: RagRetriever | None = None,
        search_client: SearchClient | None = None,
        fetcher: Fetcher | None = None,
        budget: AgentBudget | None = None,
        traces_dir: str | Path | None = None,
    ):
        if mode is PipelineMode.RAG and retriever is None:
            raise ValueError("rag mode needs a retriever")
        if mode is PipelineMode.AGENTIC_SEARCH and search_client is None:
            raise ValueError("agentic mode needs a search client")
        self.mode = mode
        self.gateway = gateway
        self.retriever = retriever
        self.search_client = search_client
        self.fetcher = fetcher
        self.budget = budget or AgentBudget()
        self.traces_dir = Path(traces_dir) if traces_dir else None
        self.system_prompt = build_system_prompt(mode)

    def context(self, record: BenchmarkRecord, run_index: int) -> RetrievedContext | None:
        report = record.report
        if self.mode is PipelineMode.RAG:
            return self.retriever.context_for(report)
        if self.mode is PipelineMode.AGENTIC_SEARCH:
            ctx, trace = run_agent(
                report,
                gateway_orchestrator(self.gateway),
                self.search_client,
                self.budget,
                fetcher=self.fetcher,
                summarizer=gateway_summarizer(self.gateway) if self.fetcher else None,
            )
            if self.traces_dir is not None:
                path = self.traces_dir / f"{report.id}.json"
                runs = read_json(path)["runs"] if path.exists() else {}
                runs[str(run_index)] = trace.to_dict()
                write_json(path, {"report_id": report.id, "runs": runs})
            return ctx
        return None

    def user_prompt(self, record: BenchmarkRecord, run_index: int = 0) -> str:
        prompt = build_user_prompt(record.report, self.context(record, run_index), self.mode)
        check_no_leakage(prompt, [f.text for f in record.fixes])
        return prompt

    def predict(self, record: BenchmarkRecord, run_index: int) -> PredictionRecord:
        user = self.user_prompt(record, run_index)
        resp = self.gateway.ask(Role.CLASSIFIER, self.system_prompt, user, json_mode=True)
        return to_prediction(record.report.id, run_index, self.mode, resp.text)


@dataclass
class RunSummary:
    completed: int = 0
    skipped: int = 0
    failed: dict[int, str] = field(default_factory=dict)
    stopped: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "completed": self.completed,
            "skipped": self.skipped,
            "failed_report_ids": sorted(self.failed),
            "failures": {str(k): v for k, v in sorted(self.failed.items())},
            "stopped": self.stopped,
        }


def completed_keys(path: str | Path) -> set[tuple[int, int]]:
    path = Path(path)
    if not path.exists():
        return set()
    return {(int(o["report_id"]), int(o["run_index"])) for _, o in iter_jsonl(path)}


def run_pipeline(
    pipeline: Pipeline,
    records: Sequence[BenchmarkRecord],
    n_runs: int,
    out_path: str | Path,
    *,
    provenance: dict[str, Any] | None = None,
    workers: int = 1,
) -> RunSummary:
    """Execute ``n_runs`` predictions per record, appending each to ``out_path``.

    Pairs (report_id, run_index) already present in ``out_path`` are skipped,
    so an interrupted run resumes where it stopped.
    """
    done = completed_keys(out_path)
    summary = RunSummary()
    lock = threading.Lock()
    stop = threading.Event()
    extra = {"provenance": provenance or {}}

    def work(record: BenchmarkRecord) -> None:
        rid = record.report.id
        for run_index in range(n_runs):
            if stop.is_set():
                return
            if (rid, run_index) in done:
                with lock:
                    summary.skipped += 1
                continue
            try:
                pred = pipeline.predict(record, run_index)
            except BudgetExceeded as exc:
                stop.set()
                with lock:
                    summary.stopped = str(exc)
                    summary.failed[rid] = f"BudgetExceeded: {exc}"
                return
            except (ProviderError, OrchestratorError, LeakageError) as exc:
                log.error("report %s run %s failed: %s", rid, run_index, exc)
                with lock:
                    summary.failed[rid] = f"{type(exc).__name__}: {exc}"
                return
            with lock:
                append_jsonl(out_path, {**pred.to_dict(), **extra})
                summary.completed += 1

    ordered = sorted(records, key=lambda r: r.report.id)
    if workers <= 1:
        for rec in ordered:
            work(rec)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, ordered))
    return summary


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    preds = [PredictionRecord.from_dict(o) for _, o in iter_jsonl(Path(path))]
    return sorted(preds, key=lambda p: (p.report_id, p.run_index))


def evaluate_predictions(
    records: Iterable[BenchmarkRecord],
    predictions: Sequence[PredictionRecord],
    mode: PipelineMode,
    *,
    judge: JudgeCall | None,
    token_embedder: TokenEmbedder,
    verdicts_path: str | Path | None = None,
    pipeline_label: str = "",
    tie_rule: TieRule = TieRule.LOWEST_RUN_INDEX,
    per_report_majority: bool = False,
    provenance: dict[str, Any] | None = None,
) -> EvaluationReport:
    """Majority votes, judge verdicts (checkpointed) and BERTScores for one pipeline run."""
    taxonomy_records = {r.report.id: r for r in records if r.is_taxonomy}
    gold = {rid: r.gold_label for rid, r in taxonomy_records.items()}
    by_report: dict[int, list[PredictionRecord]] = {}
    for p in predictions:
        if p.report_id in taxonomy_records:
            by_report.setdefault(p.report_id, []).append(p)

    votes = None
    if mode.uses_taxonomy:
        votes = {rid: majority_vote(by_report.get(rid, []), tie_rule) for rid in gold}

    cached: dict[tuple[int, int], JudgeVerdict] = {}
    if verdicts_path is not None and Path(verdicts_path).exists():
        for _, o in iter_jsonl(Path(verdicts_path)):
            v = JudgeVerdict.from_dict(o)
            cached[(v.report_id, v.run_index)] = v

    verdicts: list[JudgeVerdict] = []
    scores: dict[int, list[float]] = {}
    for rid in sorted(by_report):
        rec = taxonomy_records[rid]
        succ = [f.text for f in rec.successful_fixes]
        if not succ:
            continue
        failed = [f.text for f in rec.failed_fixes]
        reference = pick_successful_reference(succ)
        failed_ref = max(failed, key=len) if failed else None
        for p in by_report[rid]:
            v = cached.get((rid, p.run_index))
            if v is None:
                if judge is None:
                    raise ConfigError("evaluation.judge_model", "no judge configured and no cached verdicts")
                v = judge_fix(p.no_code_fix, reference, failed_ref, judge, report_id=rid, run_index=p.run_index)
                if verdicts_path is not None:
                    append_jsonl(verdicts_path, {**v.to_dict(), "provenance": provenance or {}})
            verdicts.append(v)
            scores.setdefault(rid, []).append(
                bertscore_f1(p.no_code_fix, succ, token_embedder) if p.no_code_fix.strip() else 0.0
            )

    return build_report(
        pipeline_label or mode.value,
        gold,
        votes,
        verdicts,
        scores,
        per_report_majority=per_report_majority,
        run_metadata=provenance or {},
    )


def provenance_block(cfg: RunConfig, gateway: Gateway | None = None) -> dict[str, Any]:
    block: dict[str, Any] = {
        "config_hash": cfg.experiment_hash(),
        "template_hash": template_hash()[:16],
        "mode": cfg.mode.value,
        "model_id": cfg.model_id,
    }
    if gateway is not None:
        block["provider"] = gateway.provider.name
        block["roles"] = {
            r.value: {"model_id": p.model_id, "temperature": p.temperature, "max_tokens": p.max_tokens}
            for r, p in sorted(gateway.roles.items(), key=lambda kv: kv[0].value)
        }
    return block


def judge_from_gateway(gateway: Gateway) -> Callable[[str, str], str]:
    return lambda system, user: gateway.ask(Role.JUDGE, system, user).text
