from __future__ import annotations

import json
import random

import pytest

from issuesupport import agent
from issuesupport.agent import AgentBudget, Finish, Search, Termination, Visit, run_agent
from issuesupport.errors import ExcludedSource, FetchError, OrchestratorError, ParseFailure, SearchProviderError
from support import make_report

URL = "https://github.com/brave/brave-browser/issues/42"
REPORT = make_report(42, title="Sync chain lost", body="My sync chain vanished.", url=URL)


def scripted(*replies: str):
    calls: list[str] = []
    it = iter(replies)

    def orchestrate(system: str, user: str) -> str:
        calls.append(user)
        return next(it)

    return orchestrate, calls


def act(kind: str, **kw) -> str:
    return json.dumps({"action": kind, **kw})


class FakeSearch:
    def __init__(self, fail: bool = False):
        self.queries: list[str] = []
        self.fail = fail

    def search(self, query):
        self.queries.append(query)
        if self.fail:
            raise SearchProviderError("503")
        return [
            agent.SearchResult("Same issue", "HTTPS://GitHub.com/brave/brave-browser/issues/42/", "dup"),
            agent.SearchResult("Forum", "https://community.brave.com/t/sync/1", f"see {URL} for details"),
        ]


class FakeFetcher:
    def __init__(self, page: str = "<p>hello</p>"):
        self.page = page
        self.urls: list[str] = []

    def fetch(self, url):
        self.urls.append(url)
        return self.page


def test_fourth_search_terminates_the_loop():
    orch, _ = scripted(*(act("search", query=f"q{i}") for i in range(4)))
    client = FakeSearch()
    ctx, trace = run_agent(REPORT, orch, client)
    assert client.queries == ["q0", "q1", "q2"]
    assert trace.searches == 3
    assert trace.terminated_by is Termination.SEARCH_BUDGET
    assert trace.turns == 4
    assert [e.turn for e in trace.evidence] == [1, 2, 3]
    assert len(ctx.items) == 3


def test_immediate_finish_gives_empty_context():
    orch, calls = scripted(act("finish"))
    ctx, trace = run_agent(REPORT, orch, FakeSearch())
    assert ctx.items == () and trace.turns == 1 and len(calls) == 1
    assert trace.terminated_by is Termination.FINISH


def test_turn_cap():
    orch, calls = scripted(*[act("visit", url="https://x.test/a")] * 100)
    budget = AgentBudget(max_turns=35)
    _, trace = run_agent(REPORT, orch, FakeSearch(), budget, fetcher=FakeFetcher(), summarizer=lambda t, u, p: p)
    assert len(calls) == 35 and trace.turns == 35
    assert trace.terminated_by is Termination.TURN_BUDGET
    assert trace.visits == 3
    assert sum("visit budget" in m for _, m in trace.faults) == 32


def test_two_malformed_replies_end_the_loop():
    orch, calls = scripted("thinking...", "still thinking", act("finish"))
    _, trace = run_agent(REPORT, orch, FakeSearch())
    assert trace.terminated_by is Termination.FAULT and len(calls) == 2
    orch, calls = scripted("oops", act("finish"))
    _, trace = run_agent(REPORT, orch, FakeSearch())
    assert trace.terminated_by is Termination.FINISH and len(trace.faults) == 1
    assert "Reply with exactly one" in calls[1] or calls[1] != calls[0]


def test_canonical_url_never_reaches_the_orchestrator_or_context():
    orch, calls = scripted(act("search", query=f"sync {URL}"), act("visit", url=URL + "#top"), act("finish"))
    fetcher = FakeFetcher()
    ctx, trace = run_agent(REPORT, orch, FakeSearch(), fetcher=fetcher, summarizer=lambda t, u, p: p)
    assert fetcher.urls == []
    assert any("excluded source" in m for _, m in trace.faults)
    blob = json.dumps(trace.to_dict()) + "".join(calls) + "".join(i.text + i.doc_id for i in ctx.items)
    assert "issues/42" not in blob.lower()


def test_failed_search_consumes_budget():
    orch, _ = scripted(*[act("search", query="q")] * 5)
    client = FakeSearch(fail=True)
    _, trace = run_agent(REPORT, orch, client)
    assert len(client.queries) == 3
    assert trace.evidence == [] and len(trace.faults) == 3
    assert trace.terminated_by is Termination.SEARCH_BUDGET


def test_visit_truncates_page_before_summarizing():
    seen: list[int] = []

    def summarize(title, url, page):
        seen.append(len(page))
        return "digest"

    item = agent.visit_and_compress(FakeFetcher("x" * 60_000), "https://x.test/p", summarize, exclude_url=URL, turn=2)
    assert seen == [50_000]
    assert item.kind is agent.EvidenceKind.PAGE_DIGEST and item.turn == 2
    with pytest.raises(ExcludedSource):
        agent.visit_and_compress(FakeFetcher(), "HTTPS://GitHub.com/brave/brave-browser/issues/42/", summarize, exclude_url=URL)
    with pytest.raises(FetchError):
        agent.visit_and_compress(FakeFetcher(), "ftp://x.test/p", summarize)


def test_orchestrator_failure_is_raised():
    def broken(system, user):
        raise RuntimeError("boom")

    with pytest.raises(OrchestratorError):
        run_agent(REPORT, broken, FakeSearch())


@pytest.mark.parametrize(
    "a, b, same",
    [
        (URL, URL + "/", True),
        (URL, URL + "#issuecomment-1", True),
        (URL, "HTTPS://GITHUB.COM/brave/brave-browser/issues/42", True),
        (URL, URL + "1", False),
        (URL, "https://github.com/brave/brave-browser/issues/4", False),
        (URL, URL + "?page=2", False),
        ("https://a.test/Path", "https://a.test/path", False),
    ],
)
def test_url_normalization(a, b, same):
    assert agent.same_source(a, b) is same


def test_redaction_keeps_neighbours():
    text = f"See {URL}. Also {URL}1 and github.com/brave/brave-browser/issues/42 too."
    out = agent.redact_url(text, URL)
    assert out.count(agent.EXCLUDED_MARK) == 2
    assert f"{URL}1" in out


def test_parse_action():
    assert agent.parse_action('{"action": "search", "query": "x"}') == Search("x")
    assert agent.parse_action('ok ```{"action":"VISIT","url":"https://a"}```') == Visit("https://a")
    assert agent.parse_action('{"action": "finish"}') == Finish()
    for bad in ["", "{}", '{"action": "search"}', '{"action": "fly"}', "[1]"]:
        with pytest.raises(ParseFailure):
            agent.parse_action(bad)


def test_budget_validation():
    with pytest.raises(ValueError):
        AgentBudget(max_searches=0)


def test_random_action_streams_respect_budgets():
    rng = random.Random(8)
    for _ in range(100):
        replies = [
            rng.choice([act("search", query="q"), act("visit", url="https://x.test/"), act("finish"), "junk"])
            for _ in range(40)
        ]
        orch, calls = scripted(*replies)
        _, trace = run_agent(REPORT, orch, FakeSearch(), fetcher=FakeFetcher(), summarizer=lambda t, u, p: "d")
        assert trace.searches <= 3 and trace.visits <= 3 and trace.turns <= 35
        assert len(calls) == trace.turns
        turns = [e.turn for e in trace.evidence]
        assert turns == sorted(set(turns))
        assert trace.terminated_by is not None


def test_cassette_record_and_replay(tmp_path):
    path = tmp_path / "cassette.json"
    live = FakeSearch()
    rec = agent.CassetteSearchClient(agent.Cassette(path, "record"), live)
    first = rec.search("sync")
    replay = agent.CassetteSearchClient(agent.Cassette(path, "replay"))
    assert replay.search("sync") == first
    assert live.queries == ["sync"]
    with pytest.raises(SearchProviderError):
        replay.search("unrecorded")
    fetch = agent.CassetteFetcher(agent.Cassette(path, "record"), FakeFetcher("<b>page</b>"))
    assert fetch.fetch("https://x.test") == "<b>page</b>"
    assert agent.CassetteFetcher(agent.Cassette(path)).fetch("https://x.test") == "<b>page</b>"


def test_html_to_text_drops_scripts():
    text = agent.html_to_text("<html><script>var x=1</script><p>Hello</p><p>World</p></html>")
    assert "var x" not in text and "Hello" in text and "World" in text
