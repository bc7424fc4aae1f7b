from __future__ import annotations

import json
import random
from datetime import datetime, timezone

import pytest

from issuesupport.errors import ContextMismatch, LeakageError, MissingField, ParseFailure, UnknownSubclass
from issuesupport.models import ContextItem, RetrievedContext
from issuesupport.prompting import (
    PipelineMode as M,
    ParsedOutput,
    PredictionRecord,
    build_system_prompt,
    build_user_prompt,
    check_no_leakage,
    parse_model_output,
    parse_mode,
    serialize_output,
    template_hash,
    template_names,
    to_prediction,
)
from issuesupport.taxonomy import InvalidSubclass as S
from support import FIXTURES, make_report

GOLDEN = FIXTURES / "prompts"
REPORT = make_report(7, title="Video does not autoplay", body="Videos on news sites stay paused.\nIs this intended?")
CTX = RetrievedContext(
    7,
    (
        ContextItem("5", "historical_issues", "Autoplay is blocked by default.", 0.9, datetime(2023, 1, 2, tzinfo=timezone.utc)),
        ContextItem("wiki/Autoplay#0", "wiki_docs", "Use site settings to allow autoplay.", 0.8),
    ),
)


def prompts_for(mode: M) -> tuple[str, str]:
    ctx = CTX if mode.uses_context else None
    return build_system_prompt(mode), build_user_prompt(REPORT, ctx, mode)


@pytest.mark.parametrize("mode", list(M))
def test_prompts_match_golden_files(mode):
    system, user = prompts_for(mode)
    assert system == (GOLDEN / f"{mode.value}.system.txt").read_text(encoding="utf-8")
    assert user == (GOLDEN / f"{mode.value}.user.txt").read_text(encoding="utf-8")


def test_title_and_body_appear_once():
    for mode in M:
        _, user = prompts_for(mode)
        assert user.count(REPORT.title) == 1
        assert user.count(REPORT.body) == 1


def test_taxonomy_prompt_lists_every_subclass():
    system = build_system_prompt(M.VANILLA)
    for s in S:
        assert system.count(f"[{s.value}]") == 1
        assert s.guideline in system


def test_without_priors_prompt_has_no_taxonomy():
    system = build_system_prompt(M.WITHOUT_PRIORS)
    for s in S:
        assert s.value not in system
        assert s.display_name.lower() not in system.lower()
    assert "classification" not in system


def test_rag_and_agentic_share_the_vanilla_system_prompt():
    assert build_system_prompt(M.RAG) == build_system_prompt(M.VANILLA) == build_system_prompt(M.AGENTIC_SEARCH)


def test_evidence_keeps_order_and_count():
    _, user = prompts_for(M.RAG)
    assert "(2 items)" in user
    assert user.index("Autoplay is blocked") < user.index("Use site settings")
    assert "timestamp: 2023-01-02T00:00:00Z" in user
    assert "timestamp: n/a" in user
    empty = build_user_prompt(REPORT, RetrievedContext(7, ()), M.RAG)
    assert "(0 items)" in empty and "(no evidence was found)" in empty


def test_context_presence_is_enforced():
    with pytest.raises(ContextMismatch):
        build_user_prompt(REPORT, None, M.RAG)
    with pytest.raises(ContextMismatch):
        build_user_prompt(REPORT, CTX, M.VANILLA)


def test_mode_aliases():
    assert parse_mode("agentic") is M.AGENTIC_SEARCH
    assert parse_mode("rag") is M.RAG
    with pytest.raises(ValueError):
        parse_mode("bogus")


def test_template_registry():
    names = template_names()
    assert "judge_user" in names and "system_taxonomy" in names
    assert len(template_hash()) == 64


def wrap(payload: str, rng: random.Random) -> str:
    pre = rng.choice(["", "Sure, here you go:\n", "Analysis done.\n\n"])
    post = rng.choice(["", "\nLet me know if you need more.", "\n"])
    fence = rng.choice(["plain", "json", "bare"])
    if fence == "json":
        payload = f"```json\n{payload}\n```"
    elif fence == "bare":
        payload = f"```\n{payload}\n```"
    return pre + payload + post


def test_parser_survives_fences_and_chatter():
    rng = random.Random(3)
    for _ in range(300):
        label = rng.choice(list(S))
        parsed = ParsedOutput(label, "because {braces} happen", f"Try this: {rng.random()}")
        raw = wrap(json.dumps(parsed.__dict__ | {"classification": label.value}, indent=rng.choice([None, 2])), rng)
        assert parse_model_output(raw, M.VANILLA) == parsed


def test_serialize_round_trip():
    for mode in M:
        cls = None if mode is M.WITHOUT_PRIORS else S.QUESTION
        p = ParsedOutput(cls, "r", "fix")
        assert parse_model_output(serialize_output(p, mode), mode) == p


def test_parser_errors():
    with pytest.raises(ParseFailure):
        parse_model_output("no json here", M.VANILLA)
    with pytest.raises(MissingField):
        parse_model_output('{"classification": "question", "reasoning": "r"}', M.VANILLA)
    with pytest.raises(UnknownSubclass):
        parse_model_output('{"classification": "bogus", "reasoning": "r", "no_code_fix": "f"}', M.VANILLA)
    ok = parse_model_output('{"reasoning": "r", "no_code_fix": "f"}', M.WITHOUT_PRIORS)
    assert ok.classification is None


def test_parse_failure_still_yields_a_run():
    p = to_prediction(3, 1, M.VANILLA, "I refuse")
    assert not p.parsed and p.classification is None and p.no_code_fix == ""
    assert PredictionRecord.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_leakage_check():
    secret = "Go to brave://settings/content/autoplay and allow the site there."
    check_no_leakage("harmless prompt", [secret])
    check_no_leakage("Thanks!", ["Thanks!"])
    with pytest.raises(LeakageError):
        check_no_leakage("evidence: " + secret, [secret])
