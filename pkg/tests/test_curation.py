from __future__ import annotations

import math
import random
from collections import Counter
from datetime import datetime, timezone

import pytest

from issuesupport import curation as cur
from issuesupport.curation import AnnotationRecord as Ann
from issuesupport.errors import (
    AdjudicationRequired,
    BadAnnotatorCount,
    EmptyInput,
    InvalidParams,
    LengthMismatch,
    SampleTooLarge,
)
from issuesupport.models import FixOutcome
from issuesupport.taxonomy import InvalidSubclass as S
from issuesupport.taxonomy import OutlierLabel
from support import make_report

CFG = cur.CurationConfig()


def test_exclusion_filter_examples():
    a = make_report(1, labels=("closed/invalid", "closed/stale"))
    b = make_report(2, labels=("closed/wontfix",))
    c = make_report(3, labels=("support",))
    assert cur.apply_exclusion_filters([a, b, c], CFG) == [b]


def test_date_cutoff_boundary():
    before = make_report(1, created=datetime(2021, 12, 31, 23, 59, 59, tzinfo=timezone.utc))
    at = make_report(2, created=datetime(2022, 1, 1, tzinfo=timezone.utc))
    assert cur.apply_date_cutoff([before, at], CFG.date_cutoff) == [at]


def test_filters_are_idempotent_and_order_preserving():
    rng = random.Random(1)
    labels = ["closed/invalid", "closed/stale", "support", "question", "closed/duplicate", "bug"]
    reports = [make_report(i, labels=tuple(rng.sample(labels, rng.randint(1, 3)))) for i in range(1, 60)]
    once = cur.apply_exclusion_filters(reports, CFG)
    assert cur.apply_exclusion_filters(once, CFG) == once
    assert [r.id for r in once] == sorted(r.id for r in once)
    cut = cur.apply_date_cutoff(reports, datetime(2023, 2, 1, tzinfo=timezone.utc))
    assert cur.apply_date_cutoff(cut, datetime(2023, 2, 1, tzinfo=timezone.utc)) == cut


def cochran_oracle(population: int, z: float, margin: float) -> int:
    n0 = z * z * 0.25 / (margin * margin)
    return min(population, math.ceil(n0 / (1 + (n0 - 1) / population)))


def test_cochran_reference_values():
    assert cur.cochran_sample_size(1404, 0.95, 0.05) == 302
    assert cur.cochran_sample_size(10, 0.95, 0.05) == 10
    # Hand arithmetic with the rounded critical value 1.96.
    n0 = 1.96**2 * 0.25 / 0.05**2
    assert n0 == pytest.approx(384.16)
    assert n0 / (1 + (n0 - 1) / 1404) == pytest.approx(301.8, abs=0.05)
    assert cochran_oracle(1404, 1.959963984540054, 0.05) == 302


def test_cochran_matches_oracle_and_is_monotone():
    for pop in [1, 2, 5, 50, 100, 500, 1404, 4463, 10_000, 100_000]:
        assert cur.cochran_sample_size(pop) == cochran_oracle(pop, 1.959963984540054, 0.05)
    pops = range(1, 5001, 50)
    sizes = [cur.cochran_sample_size(p) for p in pops]
    assert sizes == sorted(sizes)
    margins = [0.01 + 0.004 * i for i in range(100)]
    by_margin = [cur.cochran_sample_size(1404, 0.95, m) for m in margins]
    assert by_margin == sorted(by_margin, reverse=True)


@pytest.mark.parametrize("kw", [{"confidence": 1.0}, {"confidence": 0.0}, {"margin": 0.0}, {"margin": 1.5}])
def test_cochran_rejects_bad_params(kw):
    with pytest.raises(InvalidParams):
        cur.cochran_sample_size(100, **kw)
    with pytest.raises(InvalidParams):
        cur.CurationConfig(**kw)


def test_random_sample_properties():
    reports = [make_report(i) for i in range(1, 21)]
    shuffled = reports[::-1]
    assert cur.random_sample(reports, 20, 1) == sorted(reports, key=lambda r: r.id)
    assert cur.random_sample(reports, 5, 42) == cur.random_sample(shuffled, 5, 42)
    with pytest.raises(SampleTooLarge):
        cur.random_sample(reports, 21, 0)


def test_random_sample_pairs_are_uniform():
    items = [make_report(i) for i in range(1, 5)]
    counts = Counter(tuple(r.id for r in cur.random_sample(items, 2, seed)) for seed in range(10_000))
    assert len(counts) == 6
    expected = 10_000 / 6
    sigma = math.sqrt(10_000 * (1 / 6) * (5 / 6))
    for pair, c in counts.items():
        assert abs(c - expected) <= 3 * sigma, pair


def test_annotator_pairs_302():
    plan = cur.assign_annotator_pairs(range(1, 303), ["A", "B", "C"])
    subsets = Counter((p.primary_a, p.primary_b) for p in plan.values())
    assert subsets == {("A", "B"): 101, ("B", "C"): 101, ("A", "C"): 100}
    adjudicators = Counter(p.adjudicator for p in plan.values())
    assert set(adjudicators) == {"A", "B", "C"}
    for p in plan.values():
        assert p.adjudicator not in (p.primary_a, p.primary_b)
    per_annotator = Counter(x for p in plan.values() for x in (p.primary_a, p.primary_b))
    assert per_annotator == {"A": 201, "B": 202, "C": 201}


def test_annotator_pairs_minimal_and_errors():
    plan = cur.assign_annotator_pairs([9, 3, 5], ["A", "B", "C"])
    assert len({(p.primary_a, p.primary_b) for p in plan.values()}) == 3
    with pytest.raises(BadAnnotatorCount):
        cur.assign_annotator_pairs([1], ["A", "B"])
    with pytest.raises(BadAnnotatorCount):
        cur.assign_annotator_pairs([1], ["A", "A", "B"])


def test_merge_rules():
    q1 = Ann(1, "A", S.QUESTION, {10}, {11})
    q2 = Ann(1, "B", S.QUESTION, {11, 12})
    merged = cur.merge_annotations(q1, q2)
    assert merged.label is S.QUESTION
    assert merged.successful_fix_comment_ids == {10, 11, 12}
    assert merged.failed_fix_comment_ids == frozenset()
    fr = Ann(1, "B", S.FEATURE_REQUEST, {12})
    adj = Ann(1, "C", S.FEATURE_REQUEST, {12})
    assert cur.merge_annotations(q1, fr, adj).label is S.FEATURE_REQUEST
    with pytest.raises(AdjudicationRequired):
        cur.merge_annotations(q1, fr)
    with pytest.raises(ValueError):
        Ann(1, "A", S.QUESTION, {1}, {1})


def test_merge_never_invents_labels():
    rng = random.Random(11)
    labels = list(S) + list(OutlierLabel)
    for _ in range(300):
        a, b, c = (Ann(1, n, rng.choice(labels)) for n in "ABC")
        assert cur.merge_annotations(a, b, c).label in {a.label, b.label, c.label}


def test_kappa_examples():
    assert cur.cohen_kappa(list("XYXZ"), list("XYXZ")) == 1.0
    assert cur.cohen_kappa(list("XXYY"), list("XYXY")) == pytest.approx(0.0, abs=1e-12)
    assert cur.cohen_kappa(list("XXXY"), list("XXYY")) == pytest.approx(0.5, abs=1e-12)
    assert cur.cohen_kappa(list("XXXX"), list("XXXX")) == 1.0
    with pytest.raises(LengthMismatch):
        cur.cohen_kappa(["X"], ["X", "Y"])
    with pytest.raises(EmptyInput):
        cur.cohen_kappa([], [])


def test_kappa_symmetric_and_alphabet_invariant():
    rng = random.Random(2)
    for _ in range(200):
        n = rng.randint(1, 15)
        a = [rng.choice("PQRS") for _ in range(n)]
        b = [rng.choice("PQRS") for _ in range(n)]
        k = cur.cohen_kappa(a, b)
        assert k == pytest.approx(cur.cohen_kappa(b, a), abs=1e-12)
        perm = dict(zip("PQRS", rng.sample("wxyz", 4)))
        assert cur.cohen_kappa([perm[x] for x in a], [perm[x] for x in b]) == pytest.approx(k, abs=1e-12)
        assert -1.0 <= k <= 1.0


def test_jaccard_examples_and_range():
    assert cur.jaccard_agreement([{1, 2}, {3}], [{1, 2}, {3}]) == 1.0
    assert cur.jaccard_agreement([{1, 2}], [{2, 3}]) == pytest.approx(1 / 3, abs=1e-12)
    assert cur.jaccard_agreement([set()], [set()]) == 1.0
    with pytest.raises(LengthMismatch):
        cur.jaccard_agreement([set()], [])
    rng = random.Random(4)
    for _ in range(200):
        a = [set(rng.sample(range(6), rng.randint(0, 3))) for _ in range(4)]
        b = [set(rng.sample(range(6), rng.randint(0, 3))) for _ in range(4)]
        j = cur.jaccard_agreement(a, b)
        assert 0.0 <= j <= 1.0
        assert (j == 1.0) == (a == b)


def test_merge_all_and_benchmark():
    reports = [make_report(i, comments=("fix one", "thanks", "bad idea")) for i in (1, 2, 3)]
    plan = cur.assign_annotator_pairs([1, 2, 3], ["A", "B", "C"])
    anns = [
        Ann(1, "A", S.QUESTION, {100}, {102}),
        Ann(1, "B", S.QUESTION, {100}),
        Ann(2, "B", S.WRONG_VERSION, {200}),
        Ann(2, "C", OutlierLabel.VALID),
        Ann(2, "A", S.WRONG_VERSION, {200}),
        Ann(3, "A", OutlierLabel.NO_CONCLUSION),
        Ann(3, "C", OutlierLabel.NO_CONCLUSION),
    ]
    gold, stats = cur.merge_all(anns, plan)
    assert [g.label for g in gold] == [S.QUESTION, S.WRONG_VERSION, OutlierLabel.NO_CONCLUSION]
    assert stats.n_reports == 3
    assert stats.jaccard_success == pytest.approx((1 + 0 + 1) / 3)
    bench = cur.build_benchmark(reports, gold)
    assert [f.outcome for f in bench[0].fixes] == [FixOutcome.SUCCESSFUL, FixOutcome.FAILED]
    assert bench[0].fixes[0].text == "fix one"
    assert bench[2].fixes == ()
    assert not bench[2].is_taxonomy
    with pytest.raises(ValueError):
        cur.merge_all(anns[1:], plan)
