"""Experiment configuration: one YAML file, overridable from the command line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agent import AgentBudget
from .errors import ConfigError
from .ingest import DEFAULT_INVALID_LABELS
from .curation import DEFAULT_EXCLUDED_LABELS
from .prompting import PipelineMode, parse_mode


@dataclass
class SourceSettings:
    repo_owner: str = "brave"
    repo_name: str = "brave-browser"
    api_base_url: str = "https://api.github.com"
    page_size: int = 100
    parallelism: int = 4
    # Issues created at or after this instant are not fetched (snapshot date).
    snapshot_at: str = "2026-01-19T00:00:00Z"


@dataclass
class CurationSettings:
    invalid_labels: list[str] = field(default_factory=lambda: sorted(DEFAULT_INVALID_LABELS))
    excluded_labels: list[str] = field(default_factory=lambda: sorted(DEFAULT_EXCLUDED_LABELS))
    date_cutoff: str = "2022-01-01T00:00:00Z"
    confidence: float = 0.95
    margin: float = 0.05
    annotators: list[str] = field(default_factory=lambda: ["A", "B", "C"])


@dataclass
class RetrievalSettings:
    k_retrieve: int = 20
    k_rerank: int = 5
    per_corpus: bool = False
    embedder: str = "hashing"
    embed_dimension: int = 512
    reranker: str = "lexical"


@dataclass
class EvaluationSettings:
    judge_model: str | None = None
    bertscore_embedder: str = "hashing"
    tie_rule: str = "lowest_run_index"
    per_report_majority: bool = False


@dataclass
class PathSettings:
    corpus: str = "data/corpus.jsonl"
    curated: str = "data/curated.jsonl"
    sample: str = "data/sample.jsonl"
    plan: str = "data/annotation_plan.json"
    annotations: str = "data/annotations.jsonl"
    benchmark: str = "data/benchmark.jsonl"
    agreement: str = "data/agreement.json"
    index: str = "index"
    results: str = "results"
    traces: str = "traces"
    cassette: str | None = None


@dataclass
class RunConfig:
    mode: PipelineMode = PipelineMode.VANILLA
    model_id: str = "mock"
    helper_model: str | None = None
    n_runs: int = 3
    seed: int = 0
    rate_limit: float | None = None
    workers: int = 1
    max_total_tokens: int | None = None
    max_tokens: int = 8192
    budget: AgentBudget = field(default_factory=AgentBudget)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    source: SourceSettings = field(default_factory=SourceSettings)
    curation: CurationSettings = field(default_factory=CurationSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def validate(self) -> None:
        if self.n_runs < 1:
            raise ConfigError("n_runs", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ConfigError("rate_limit", "must be positive")
        if self.retrieval.k_retrieve < 1:
            raise ConfigError("retrieval.k_retrieve", "must be >= 1")
        if not 1 <= self.retrieval.k_rerank <= self.retrieval.k_retrieve:
            raise ConfigError("retrieval.k_rerank", "must lie in [1, k_retrieve]")
        if len(set(self.curation.annotators)) != 3:
            raise ConfigError("curation.annotators", "need exactly 3 distinct annotators")
        for name in ("confidence", "margin"):
            if not 0 < getattr(self.curation, name) < 1:
                raise ConfigError(f"curation.{name}", "must lie in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    def experiment_hash(self) -> str:
        """Digest of everything that shapes predictions; file locations are left out."""
        d = self.to_dict()
        for key in ("paths", "workers", "source"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {
    "budget": AgentBudget,
    "retrieval": RetrievalSettings,
    "evaluation": EvaluationSettings,
    "source": SourceSettings,
    "curation": CurationSettings,
    "paths": PathSettings,
}


def _build(cls: type, data: Any, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from None


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping")
    top: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(key, "unknown field")
        if key in _SECTIONS:
            top[key] = _build(_SECTIONS[key], value, key)
        elif key == "mode":
            try:
                top[key] = parse_mode(str(value))
            except ValueError:
                raise ConfigError("mode", f"unknown pipeline mode {value!r}") from None
        else:
            top[key] = value
    cfg = RunConfig(**top)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML: {exc}") from None
    cfg = config_from_dict(data)
    base = p.parent
    for f in dataclasses.fields(PathSettings):
        value = getattr(cfg.paths, f.name)
        if value is not None and not Path(value).is_absolute():
            setattr(cfg.paths, f.name, str(base / value))
    return cfg
