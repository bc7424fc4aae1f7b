from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone

import pytest

from issuesupport.errors import SchemaError, UnknownSubclass
from issuesupport.models import (
    BenchmarkRecord,
    BugReport,
    Comment,
    FixOutcome,
    NoCodeFix,
    decode,
    parse_timestamp,
)
from issuesupport.taxonomy import (
    SUBCLASS_ORDER,
    InvalidSubclass,
    OutlierLabel,
    canonical_name,
    guideline_for,
    parse_gold_label,
    parse_outlier,
    parse_subclass,
)
from support import make_report


def test_exactly_seven_subclasses_with_text():
    assert len(InvalidSubclass) == 7
    for s in InvalidSubclass:
        assert s.description.strip()
        assert s.guideline.strip()
        assert s.display_name.strip()


@pytest.mark.parametrize(
    "text,expected",
    [
        ("working_as_designed", InvalidSubclass.WORKING_AS_DESIGNED),
        ("Non-reproducibility", InvalidSubclass.NON_REPRODUCIBILITY),
        ("  QUESTION ", InvalidSubclass.QUESTION),
        ("Feature Request", InvalidSubclass.FEATURE_REQUEST),
        ("Wrong Version (Already Fixed)", InvalidSubclass.WRONG_VERSION),
        ("external system & dependency issues", InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY),
        ("faulty-configuration-environment-setup", InvalidSubclass.FAULTY_CONFIGURATION),
    ],
)
def test_parse_subclass_forms(text, expected):
    assert parse_subclass(text) is expected


@pytest.mark.parametrize("text", ["duplicate", "valid", "no_conclusion", "bug", "", "questions?!x"])
def test_parse_subclass_rejects(text):
    with pytest.raises(UnknownSubclass):
        parse_subclass(text)


def test_round_trip_and_disjoint_label_sets():
    for s in InvalidSubclass:
        assert parse_subclass(canonical_name(s)) is s
        assert parse_subclass(s.display_name) is s
    for o in OutlierLabel:
        assert parse_outlier(o.value) is o
        with pytest.raises(UnknownSubclass):
            parse_subclass(o.value)
        assert parse_gold_label(o.value) is o
    assert len(OutlierLabel) == 4


def test_guidelines_verbatim_prefixes_and_injective():
    assert guideline_for(InvalidSubclass.WRONG_VERSION).startswith(
        "Inform the user that the issue has already been resolved in a newer version"
    )
    assert guideline_for(InvalidSubclass.QUESTION).startswith("Provide a solution if available")
    assert len({guideline_for(s) for s in InvalidSubclass}) == 7
    assert list(SUBCLASS_ORDER) == list(InvalidSubclass)


def test_report_invariants():
    t = datetime(2023, 1, 1, tzinfo=timezone.utc)
    with pytest.raises(ValueError):
        BugReport(1, "t", "b", frozenset(), t, t - timedelta(seconds=1))
    c1 = Comment(1, "a", "x", t + timedelta(hours=2))
    c2 = Comment(2, "a", "y", t + timedelta(hours=1))
    with pytest.raises(ValueError):
        BugReport(1, "t", "b", frozenset(), t, None, (c1, c2))
    with pytest.raises(ValueError):
        Comment(3, "a", "z", t, {"+1": -1})


def test_fix_text_joins_comments_in_thread_order():
    r = make_report(5, comments=("first", "second", "third"))
    fix = NoCodeFix.from_comments(r, [502, 500], FixOutcome.SUCCESSFUL)
    assert fix.comment_ids == (500, 502)
    assert fix.text == "first\n\nthird"
    with pytest.raises(ValueError):
        NoCodeFix.from_comments(r, [999], FixOutcome.FAILED)


def test_outlier_record_carries_no_fixes():
    r = make_report(5, comments=("a",))
    fix = NoCodeFix.from_comments(r, [500], FixOutcome.SUCCESSFUL)
    with pytest.raises(ValueError):
        BenchmarkRecord(r, OutlierLabel.VALID, (fix,))
    rec = BenchmarkRecord(r, InvalidSubclass.QUESTION, (fix, NoCodeFix.from_comments(r, [500], FixOutcome.FAILED)))
    assert len(rec.successful_fixes) == 1 and len(rec.failed_fixes) == 1


def test_timestamps_are_utc():
    dt = parse_timestamp("2022-01-01T02:00:00+02:00")
    assert dt == datetime(2022, 1, 1, tzinfo=timezone.utc)
    assert parse_timestamp("2022-01-01T00:00:00Z").tzinfo is not None


def test_records_round_trip_through_dicts():
    rng = random.Random(3)
    for rid in range(1, 30):
        r = make_report(rid, labels=("closed/invalid", "x"), comments=tuple(f"c{i}" for i in range(rng.randint(1, 4))))
        assert BugReport.from_dict(r.to_dict()) == r
        label = rng.choice(list(InvalidSubclass))
        rec = BenchmarkRecord(r, label, (NoCodeFix.from_comments(r, [r.comments[0].id], FixOutcome.SUCCESSFUL),))
        assert BenchmarkRecord.from_dict(rec.to_dict()) == rec


def test_decode_maps_errors_to_schema_error():
    with pytest.raises(SchemaError) as exc:
        decode(BugReport, {"title": "no id"}, line_no=4)
    assert exc.value.line_no == 4
