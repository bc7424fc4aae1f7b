"""Benchmark construction: filtering, sampling, annotator pairing, merging and agreement."""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from statistics import NormalDist
from typing import Any, Hashable, Iterable, Sequence

from .errors import (
    AdjudicationRequired,
    BadAnnotatorCount,
    EmptyInput,
    InvalidParams,
    LengthMismatch,
    SampleTooLarge,
)
from .models import BenchmarkRecord, BugReport, FixOutcome, GoldLabel, NoCodeFix
from .taxonomy import InvalidSubclass, parse_gold_label

DEFAULT_EXCLUDED_LABELS: frozenset[str] = frozenset(
    {"closed/duplicate", "closed/stale", "closed/no-milestone", "support"}
)
DEFAULT_DATE_CUTOFF = datetime(2022, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class CurationConfig:
    excluded_labels: frozenset[str] = DEFAULT_EXCLUDED_LABELS
    date_cutoff: datetime = DEFAULT_DATE_CUTOFF
    confidence: float = 0.95
    margin: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "excluded_labels", frozenset(self.excluded_labels))
        _check_fraction("confidence", self.confidence)
        _check_fraction("margin", self.margin)


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise InvalidParams(f"{name} must lie in (0, 1), got {value}")


def apply_exclusion_filters(reports: Iterable[BugReport], cfg: CurationConfig) -> list[BugReport]:
    return [r for r in reports if r.labels.isdisjoint(cfg.excluded_labels)]


def apply_date_cutoff(reports: Iterable[BugReport], cutoff: datetime) -> list[BugReport]:
    return [r for r in reports if r.created_at >= cutoff]


def cochran_sample_size(population: int, confidence: float = 0.95, margin: float = 0.05) -> int:
    """Cochran's sample size for a proportion (p = 0.5) with finite-population correction."""
    _check_fraction("confidence", confidence)
    _check_fraction("margin", margin)
    if population < 1:
        raise InvalidParams("population must be >= 1")
    z = NormalDist().inv_cdf(1.0 - (1.0 - confidence) / 2.0)
    n0 = z * z * 0.25 / (margin * margin)
    n = n0 / (1.0 + (n0 - 1.0) / population)
    return min(population, math.ceil(n))


def random_sample(reports: Sequence[BugReport], n: int, seed: int) -> list[BugReport]:
    """Seeded uniform sample without replacement, returned in report-id order.

    The pool is sorted by id before drawing so the result does not depend on input order.
    """
    if n > len(reports):
        raise SampleTooLarge(f"cannot draw {n} from {len(reports)} reports")
    if n < 0:
        raise InvalidParams("n must be >= 0")
    pool = sorted(reports, key=lambda r: r.id)
    picked = random.Random(seed).sample(pool, n)
    return sorted(picked, key=lambda r: r.id)


@dataclass(frozen=True)
class PairAssignment:
    primary_a: str
    primary_b: str
    adjudicator: str


def assign_annotator_pairs(report_ids: Iterable[int], annotators: Sequence[str]) -> dict[int, PairAssignment]:
    """Rotating-pair plan: ids go round-robin (in id order) to three subsets.

    Subset k is reviewed by a distinct pair; the annotator left out adjudicates it.
    With annotators (A, B, C) the pairs are (A, B), (B, C), (A, C).
    """
    if len(annotators) != 3 or len(set(annotators)) != 3:
        raise BadAnnotatorCount(f"need exactly 3 distinct annotators, got {list(annotators)}")
    a, b, c = annotators
    plans = (PairAssignment(a, b, c), PairAssignment(b, c, a), PairAssignment(a, c, b))
    return {rid: plans[i % 3] for i, rid in enumerate(sorted(set(report_ids)))}


@dataclass(frozen=True)
class AnnotationRecord:
    report_id: int
    annotator: str
    label: GoldLabel
    successful_fix_comment_ids: frozenset[int] = field(default_factory=frozenset)
    failed_fix_comment_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "successful_fix_comment_ids", frozenset(self.successful_fix_comment_ids))
        object.__setattr__(self, "failed_fix_comment_ids", frozenset(self.failed_fix_comment_ids))
        if self.successful_fix_comment_ids & self.failed_fix_comment_ids:
            raise ValueError(f"report {self.report_id}: a comment cannot be both a successful and a failed fix")

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "annotator": self.annotator,
            "label": self.label.value,
            "successful_fix_comment_ids": sorted(self.successful_fix_comment_ids),
            "failed_fix_comment_ids": sorted(self.failed_fix_comment_ids),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AnnotationRecord":
        return cls(
            report_id=int(d["report_id"]),
            annotator=str(d["annotator"]),
            label=parse_gold_label(d["label"]),
            successful_fix_comment_ids=frozenset(int(i) for i in d.get("successful_fix_comment_ids") or ()),
            failed_fix_comment_ids=frozenset(int(i) for i in d.get("failed_fix_comment_ids") or ()),
        )


GOLD_ANNOTATOR = "gold"


def merge_annotations(
    a: AnnotationRecord,
    b: AnnotationRecord,
    adjudicator: AnnotationRecord | None = None,
) -> AnnotationRecord:
    ids = {a.report_id, b.report_id} | ({adjudicator.report_id} if adjudicator else set())
    if len(ids) != 1:
        raise ValueError(f"annotations refer to different reports: {sorted(ids)}")
    if a.label == b.label:
        return AnnotationRecord(
            report_id=a.report_id,
            annotator=GOLD_ANNOTATOR,
            label=a.label,
            successful_fix_comment_ids=a.successful_fix_comment_ids | b.successful_fix_comment_ids,
            failed_fix_comment_ids=(a.failed_fix_comment_ids | b.failed_fix_comment_ids)
            - (a.successful_fix_comment_ids | b.successful_fix_comment_ids),
        )
    if adjudicator is None:
        raise AdjudicationRequired(a.report_id)
    return AnnotationRecord(
        report_id=a.report_id,
        annotator=GOLD_ANNOTATOR,
        label=adjudicator.label,
        successful_fix_comment_ids=adjudicator.successful_fix_comment_ids,
        failed_fix_comment_ids=adjudicator.failed_fix_comment_ids,
    )


@dataclass(frozen=True)
class AgreementStats:
    kappa: float
    jaccard_success: float
    jaccard_failed: float
    n_reports: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "kappa": self.kappa,
            "jaccard_success": self.jaccard_success,
            "jaccard_failed": self.jaccard_failed,
            "n_reports": self.n_reports,
        }


def cohen_kappa(labels_a: Sequence[Hashable], labels_b: Sequence[Hashable]) -> float:
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"{len(labels_a)} vs {len(labels_b)} labels")
    n = len(labels_a)
    if n == 0:
        raise EmptyInput("no labels")
    p_o = sum(x == y for x, y in zip(labels_a, labels_b)) / n
    ca, cb = Counter(labels_a), Counter(labels_b)
    p_e = sum(ca[k] * cb[k] for k in ca.keys() & cb.keys()) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def jaccard_agreement(sets_a: Sequence[Iterable[Hashable]], sets_b: Sequence[Iterable[Hashable]]) -> float:
    """Mean per-item intersection over union; two empty sets count as full agreement."""
    if len(sets_a) != len(sets_b):
        raise LengthMismatch(f"{len(sets_a)} vs {len(sets_b)} items")
    if not sets_a:
        raise EmptyInput("no items")
    total = 0.0
    for x, y in zip(sets_a, sets_b):
        x, y = set(x), set(y)
        union = x | y
        total += 1.0 if not union else len(x & y) / len(union)
    return total / len(sets_a)


def agreement_stats(pairs: Sequence[tuple[AnnotationRecord, AnnotationRecord]]) -> AgreementStats:
    """Agreement between the two primary annotators over every doubly-annotated report."""
    if not pairs:
        raise EmptyInput("no annotation pairs")
    return AgreementStats(
        kappa=cohen_kappa([a.label for a, _ in pairs], [b.label for _, b in pairs]),
        jaccard_success=jaccard_agreement(
            [a.successful_fix_comment_ids for a, _ in pairs], [b.successful_fix_comment_ids for _, b in pairs]
        ),
        jaccard_failed=jaccard_agreement(
            [a.failed_fix_comment_ids for a, _ in pairs], [b.failed_fix_comment_ids for _, b in pairs]
        ),
        n_reports=len(pairs),
    )


def merge_all(
    annotations: Iterable[AnnotationRecord],
    plan: dict[int, PairAssignment],
) -> tuple[list[AnnotationRecord], AgreementStats]:
    """Merge every planned report's annotations into gold records and compute agreement."""
    by_key = {(r.report_id, r.annotator): r for r in annotations}
    gold: list[AnnotationRecord] = []
    pairs: list[tuple[AnnotationRecord, AnnotationRecord]] = []
    for rid in sorted(plan):
        p = plan[rid]
        try:
            a, b = by_key[(rid, p.primary_a)], by_key[(rid, p.primary_b)]
        except KeyError as exc:
            raise ValueError(f"report {rid}: missing primary annotation by {exc.args[0][1]}") from None
        pairs.append((a, b))
        gold.append(merge_annotations(a, b, by_key.get((rid, p.adjudicator))))
    return gold, agreement_stats(pairs)


def build_benchmark(reports: Iterable[BugReport], gold: Iterable[AnnotationRecord]) -> list[BenchmarkRecord]:
    """Join gold annotations with their reports; each selected comment becomes one fix."""
    by_id = {r.id: r for r in reports}
    out: list[BenchmarkRecord] = []
    for g in sorted(gold, key=lambda g: g.report_id):
        report = by_id[g.report_id]
        fixes: list[NoCodeFix] = []
        position = {c.id: i for i, c in enumerate(report.comments)}
        if isinstance(g.label, InvalidSubclass):
            for outcome, ids in (
                (FixOutcome.SUCCESSFUL, g.successful_fix_comment_ids),
                (FixOutcome.FAILED, g.failed_fix_comment_ids),
            ):
                for cid in sorted(ids, key=lambda i: position.get(i, math.inf)):
                    fixes.append(NoCodeFix.from_comments(report, [cid], outcome))
        out.append(BenchmarkRecord(report=report, gold_label=g.label, fixes=tuple(fixes)))
    return out
