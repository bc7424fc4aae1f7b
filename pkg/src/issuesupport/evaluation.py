"""Vote aggregation, classification metrics, fix-quality metrics and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import EmbedderError, GoldMismatch
from .llm import Gateway, Role
from .prompting import PipelineMode, PredictionRecord, load_template, render
from .retrieval import HashingEmbedder, tokenize
from .taxonomy import SUBCLASS_ORDER, InvalidSubclass
from .storage import write_json

# --- majority vote -------------------------------------------------------------


class TieRule(str, Enum):
    LOWEST_RUN_INDEX = "lowest_run_index"
    ABSTAIN = "abstain"


def majority_vote(runs: Sequence[PredictionRecord], tie_rule: TieRule = TieRule.LOWEST_RUN_INDEX) -> InvalidSubclass | None:
    """Plurality label over the parsed runs of one report.

    Ties go to the label of the earliest run among the tied labels (or to no
    label under ``ABSTAIN``), so the result never depends on list order.
    """
    modes = {r.mode for r in runs}
    if PipelineMode.WITHOUT_PRIORS in modes:
        raise ValueError("runs without taxonomy priors carry no classification")
    labelled = sorted((r.run_index, r.classification) for r in runs if r.classification is not None)
    if not labelled:
        return None
    counts = Counter(label for _, label in labelled)
    top = max(counts.values())
    tied = {label for label, c in counts.items() if c == top}
    if len(tied) == 1:
        return tied.pop()
    if tie_rule is TieRule.ABSTAIN:
        return None
    return next(label for _, label in labelled if label in tied)


# --- classification metrics ----------------------------------------------------


@dataclass(frozen=True)
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    support: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class ClassificationResult:
    per_class: dict[Hashable, ClassMetrics]
    weighted_f1: float
    n: int


def classification_metrics(
    votes: Mapping[Any, Hashable | None],
    gold: Mapping[Any, Hashable],
) -> ClassificationResult:
    """Per-class precision/recall/F1 and the support-weighted F1 over gold classes.

    An absent vote is a false negative for the gold class and a false positive for nothing.
    """
    if set(votes) != set(gold):
        missing, extra = sorted(map(str, set(gold) - set(votes))), sorted(map(str, set(votes) - set(gold)))
        raise GoldMismatch(f"vote/gold ids differ: missing {missing[:5]}, extra {extra[:5]}")
    if not gold:
        raise GoldMismatch("no gold records")
    labels = set(gold.values()) | {v for v in votes.values() if v is not None}
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for rid, g in gold.items():
        v = votes[rid]
        if v == g:
            tp[g] += 1
        else:
            fn[g] += 1
            if v is not None:
                fp[v] += 1
    support = Counter(gold.values())
    per_class = {c: ClassMetrics(tp[c], fp[c], fn[c], support[c]) for c in labels}
    n = len(gold)
    weighted = math.fsum(support[c] / n * per_class[c].f1 for c in support)
    return ClassificationResult(per_class, weighted, n)


# --- BERTScore -------------------------------------------------------------------


class TokenEmbedder(Protocol):
    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        """Tokens of ``text`` and one contextual vector per token (shape (n, d))."""


class OneHotTokenEmbedder:
    """Every distinct token gets its own axis; similarity is exact token identity."""

    def __init__(self) -> None:
        self._vocab: dict[str, int] = {}

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        toks = tokenize(text)
        for t in toks:
            self._vocab.setdefault(t, len(self._vocab))
        vecs = np.zeros((len(toks), max(len(self._vocab), 1)))
        for i, t in enumerate(toks):
            vecs[i, self._vocab[t]] = 1.0
        return toks, vecs


class HashingTokenEmbedder:
    """Offline contextual token vectors: each token's hashed vector mixed with its neighbours'."""

    def __init__(self, dimension: int = 256, window: int = 2, neighbour_weight: float = 0.35):
        self._base = HashingEmbedder(dimension)
        self.window = window
        self.neighbour_weight = neighbour_weight

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        toks = tokenize(text)
        if not toks:
            return toks, np.zeros((0, self._base.dimension))
        base = self._base.embed(toks)
        out = base.copy()
        for i in range(len(toks)):
            for off in range(1, self.window + 1):
                w = self.neighbour_weight / off
                if i - off >= 0:
                    out[i] += w * base[i - off]
                if i + off < len(toks):
                    out[i] += w * base[i + off]
        return toks, out


class TransformersTokenEmbedder:
    """Contextual token embeddings from a Hugging Face encoder (loaded lazily)."""

    def __init__(self, model_name: str = "roberta-large", layer: int | None = None, device: str = "cpu"):
        self.model_name = model_name
        self.layer = layer
        self.device = device
        self._model = None
        self._tokenizer = None

    def _load(self) -> None:
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EmbedderError("transformers is not installed") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(self.model_name)
            self._model = AutoModel.from_pretrained(self.model_name).to(self.device).eval()
        except Exception as exc:  # network, missing weights, bad name
            raise EmbedderError(f"cannot load {self.model_name}: {exc}") from exc

    def embed_tokens(self, text: str) -> tuple[list[str], np.ndarray]:
        if self._model is None:
            self._load()
        import torch

        enc = self._tokenizer(text, return_tensors="pt", truncation=True, max_length=510)
        with torch.no_grad():
            out = self._model(**enc.to(self.device), output_hidden_states=True)
        hidden = out.hidden_states[self.layer] if self.layer is not None else out.last_hidden_state
        vecs = hidden[0, 1:-1].cpu().numpy().astype(np.float64)  # drop special tokens
        ids = enc["input_ids"][0, 1:-1].tolist()
        return self._tokenizer.convert_ids_to_tokens(ids), vecs


def _greedy_f1(cand: np.ndarray, ref: np.ndarray) -> tuple[float, float, float]:
    def unit(m: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(m, axis=1, keepdims=True)
        return np.divide(m, n, out=np.zeros_like(m), where=n > 0)

    if cand.shape[1] != ref.shape[1]:
        width = max(cand.shape[1], ref.shape[1])
        cand = np.pad(cand, ((0, 0), (0, width - cand.shape[1])))
        ref = np.pad(ref, ((0, 0), (0, width - ref.shape[1])))
    sim = unit(cand) @ unit(ref).T
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def bertscore(candidate: str, reference: str, embedder: TokenEmbedder) -> tuple[float, float, float]:
    """Greedy-matching (precision, recall, F1) between two texts."""
    _, c = embedder.embed_tokens(candidate)
    _, r = embedder.embed_tokens(reference)
    if len(c) == 0 or len(r) == 0:
        return 0.0, 0.0, 0.0
    return _greedy_f1(c, r)


def bertscore_f1(candidate: str, references: Sequence[str], embedder: TokenEmbedder) -> float:
    """Best F1 of ``candidate`` against any of the references."""
    if not references:
        raise ValueError("need at least one reference")
    if not candidate.strip():
        raise ValueError("candidate must be non-empty")
    return max(bertscore(candidate, ref, embedder)[2] for ref in references)


# --- judge -------------------------------------------------------------------------

NO_FAILED_FIX = "N/A — no failed fix was recorded for this issue"
_MARKER = re.compile(r"RESEMBLES\s+(SUCCESSFUL|FAILED)")


class Verdict(str, Enum):
    RESEMBLES_SUCCESSFUL = "resembles_successful"
    RESEMBLES_FAILED = "resembles_failed"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class JudgeVerdict:
    report_id: int
    verdict: Verdict
    rationale: str
    run_index: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"report_id": self.report_id, "run_index": self.run_index, "verdict": self.verdict.value, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "JudgeVerdict":
        return cls(int(d["report_id"]), Verdict(d["verdict"]), d.get("rationale") or "", int(d.get("run_index") or 0))


def extract_verdict(reply: str) -> Verdict:
    """The last RESEMBLES SUCCESSFUL/FAILED marker in the reply decides; none means unparseable."""
    matches = _MARKER.findall(reply)
    if not matches:
        return Verdict.UNPARSEABLE
    return Verdict.RESEMBLES_SUCCESSFUL if matches[-1] == "SUCCESSFUL" else Verdict.RESEMBLES_FAILED


def judge_prompts(predicted_fix: str, successful: str, failed: str | None) -> tuple[str, str]:
    """(system, user) pair; the two joined by a blank line give the full judge template."""
    return load_template("judge_system"), render(
        "judge_user", pred=predicted_fix, succ=successful, failed=failed if failed else NO_FAILED_FIX
    )


def pick_successful_reference(fixes: Sequence[str]) -> str:
    """The longest successful fix (first on ties) goes into the judge prompt."""
    if not fixes:
        raise ValueError("need at least one successful fix")
    return max(fixes, key=len)


JudgeCall = Callable[[str, str], str]


def gateway_judge(gateway: Gateway) -> JudgeCall:
    return lambda system, user: gateway.ask(Role.JUDGE, system, user).text


def judge_fix(
    predicted_fix: str,
    gt_success: str,
    gt_failed: str | None,
    judge: JudgeCall,
    *,
    report_id: int = 0,
    run_index: int = 0,
) -> JudgeVerdict:
    if not gt_success.strip():
        raise ValueError("successful ground-truth fix must be non-empty")
    if not predicted_fix.strip():
        # Nothing to judge (e.g. the run failed to parse); scored as a miss.
        return JudgeVerdict(report_id, Verdict.UNPARSEABLE, "empty prediction; judge not called", run_index)
    system, user = judge_prompts(predicted_fix, gt_success, gt_failed)
    reply = judge(system, user)
    return JudgeVerdict(report_id, extract_verdict(reply), reply, run_index)


def aggregate_judge_rate(verdicts: Iterable[JudgeVerdict], per_report_majority: bool = False) -> float:
    """Share of run-level verdicts that resemble the successful fix (unparseable counts as a miss).

    With ``per_report_majority`` each report contributes one vote (success on a strict majority of its runs).
    """
    verdicts = list(verdicts)
    if not verdicts:
        return 0.0
    if not per_report_majority:
        return sum(v.verdict is Verdict.RESEMBLES_SUCCESSFUL for v in verdicts) / len(verdicts)
    by_report: dict[int, list[JudgeVerdict]] = {}
    for v in verdicts:
        by_report.setdefault(v.report_id, []).append(v)
    wins = sum(
        2 * sum(v.verdict is Verdict.RESEMBLES_SUCCESSFUL for v in vs) > len(vs) for vs in by_report.values()
    )
    return wins / len(by_report)


# --- report --------------------------------------------------------------------------


@dataclass
class SubclassRow:
    n: int = 0
    f1: float | None = None
    judge_rate: float | None = None
    judge_n: int = 0
    bertscore_f1: float | None = None


@dataclass
class EvaluationReport:
    pipeline: str
    per_subclass: dict[InvalidSubclass, SubclassRow]
    overall_weighted_f1: float | None
    overall_judge_rate: float | None
    overall_bertscore_f1: float | None
    n: int
    run_metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipeline": self.pipeline,
            "n": self.n,
            "per_subclass": {
                s.value: {
                    "n": row.n,
                    "f1": row.f1,
                    "judge_rate": row.judge_rate,
                    "judge_n": row.judge_n,
                    "bertscore_f1": row.bertscore_f1,
                }
                for s, row in ((s, self.per_subclass[s]) for s in SUBCLASS_ORDER if s in self.per_subclass)
            },
            "overall_weighted_f1": self.overall_weighted_f1,
            "overall_judge_rate": self.overall_judge_rate,
            "overall_bertscore_f1": self.overall_bertscore_f1,
            "run_metadata": self.run_metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvaluationReport":
        rows = {
            InvalidSubclass(k): SubclassRow(v["n"], v.get("f1"), v.get("judge_rate"), v.get("judge_n", 0), v.get("bertscore_f1"))
            for k, v in d["per_subclass"].items()
        }
        return cls(
            d["pipeline"],
            rows,
            d.get("overall_weighted_f1"),
            d.get("overall_judge_rate"),
            d.get("overall_bertscore_f1"),
            int(d["n"]),
            dict(d.get("run_metadata") or {}),
        )


def build_report(
    pipeline: str,
    gold: Mapping[int, InvalidSubclass],
    votes: Mapping[int, InvalidSubclass | None] | None = None,
    verdicts: Iterable[JudgeVerdict] = (),
    bertscores: Mapping[int, Sequence[float]] | None = None,
    *,
    per_report_majority: bool = False,
    run_metadata: dict[str, Any] | None = None,
) -> EvaluationReport:
    """Combine classification votes, judge verdicts and per-run BERTScores into one table.

    ``votes`` is None for pipelines that do not classify. Verdicts and scores
    are only expected for reports that have a successful ground-truth fix.
    """
    rows = {s: SubclassRow(n=0) for s in SUBCLASS_ORDER}
    for g in gold.values():
        rows[g].n += 1
    weighted = None
    if votes is not None:
        result = classification_metrics(votes, gold)
        weighted = result.weighted_f1
        for s in SUBCLASS_ORDER:
            m = result.per_class.get(s)
            rows[s].f1 = m.f1 if m is not None and (m.support or m.fp) else (0.0 if rows[s].n else None)
    verdicts = list(verdicts)
    for s in SUBCLASS_ORDER:
        vs = [v for v in verdicts if gold.get(v.report_id) is s]
        if vs:
            rows[s].judge_rate = aggregate_judge_rate(vs, per_report_majority)
            rows[s].judge_n = len(vs)
    overall_judge = aggregate_judge_rate(verdicts, per_report_majority) if verdicts else None
    overall_bs = None
    if bertscores:
        all_scores: list[float] = []
        for s in SUBCLASS_ORDER:
            ss = [x for rid, xs in bertscores.items() if gold.get(rid) is s for x in xs]
            if ss:
                rows[s].bertscore_f1 = math.fsum(ss) / len(ss)
                all_scores.extend(ss)
        overall_bs = math.fsum(all_scores) / len(all_scores) if all_scores else None
    return EvaluationReport(pipeline, rows, weighted, overall_judge, overall_bs, len(gold), run_metadata or {})


class ReportFormat(str, Enum):
    MARKDOWN = "markdown"
    CSV = "csv"
    JSON = "json"


_COLUMNS = (("f1", "F1"), ("judge_rate", "Judge (%)"), ("bertscore_f1", "BERTScore F1"))


def _fmt(key: str, value: float | None) -> str:
    if value is None:
        return "-"
    if key == "judge_rate":
        return f"{value * 100:.1f}%"
    return f"{value:.2f}"


def report_rows(reports: Sequence[EvaluationReport]) -> tuple[list[str], list[list[str]]]:
    """Header and body rows: one per subclass in taxonomy order plus Overall."""
    header = ["Subclass", "N"] + [f"{r.pipeline} {title}" for r in reports for _, title in _COLUMNS]
    rows: list[list[str]] = []
    for s in SUBCLASS_ORDER:
        row = [s.display_name, str(reports[0].per_subclass[s].n)]
        for r in reports:
            sub = r.per_subclass[s]
            row += [_fmt(key, getattr(sub, key)) for key, _ in _COLUMNS]
        rows.append(row)
    overall = ["Overall", str(reports[0].n)]
    for r in reports:
        overall += [
            _fmt("f1", r.overall_weighted_f1),
            _fmt("judge_rate", r.overall_judge_rate),
            _fmt("bertscore_f1", r.overall_bertscore_f1),
        ]
    rows.append(overall)
    return header, rows


def render_report(reports: Sequence[EvaluationReport], fmt: ReportFormat) -> str:
    if not reports:
        raise ValueError("nothing to render")
    header, rows = report_rows(reports)
    if fmt is ReportFormat.MARKDOWN:
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt is ReportFormat.CSV:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    payload = {
        "columns": header,
        "rows": [dict(zip(header, r)) for r in rows],
        "pipelines": [r.to_dict() for r in reports],
    }
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


_SUFFIX = {ReportFormat.MARKDOWN: "md", ReportFormat.CSV: "csv", ReportFormat.JSON: "json"}


def emit_report(
    reports: Sequence[EvaluationReport],
    directory: str | Path,
    formats: Iterable[ReportFormat] = tuple(ReportFormat),
    stem: str = "report",
) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = directory / f"{stem}.{_SUFFIX[fmt]}"
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(render_report(reports, fmt), encoding="utf-8")
        tmp.replace(path)
        written.append(path)
    return written


def save_report_data(report: EvaluationReport, path: str | Path) -> None:
    write_json(path, report.to_dict())
