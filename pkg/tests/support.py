"""Shared test helpers: a fake issue-tracker API and small builders."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import httpx

from issuesupport.models import BugReport, Comment

FIXTURES = Path(__file__).parent / "fixtures"


def github_transport(issues: list[dict], comments: dict[str, list[dict]], calls: list[str] | None = None) -> httpx.MockTransport:
    """Serve closed issues page by page (``page``/``per_page`` params) and comment threads."""

    def handler(request: httpx.Request) -> httpx.Response:
        if calls is not None:
            calls.append(str(request.url))
        path = request.url.path
        if path.endswith("/comments"):
            number = path.rstrip("/").split("/")[-2]
            return httpx.Response(200, json=comments.get(number, []))
        if path.endswith("/issues"):
            per_page = int(request.url.params.get("per_page", 30))
            page = int(request.url.params.get("page", 1))
            chunk = issues[(page - 1) * per_page : page * per_page]
            return httpx.Response(200, json=chunk)
        return httpx.Response(404, json={"message": "not found"})

    return httpx.MockTransport(handler)


def e2e_client(calls: list[str] | None = None) -> httpx.Client:
    data = json.loads((FIXTURES / "e2e" / "github_issues.json").read_text())
    return httpx.Client(transport=github_transport(data["issues"], data["comments"], calls))


T0 = datetime(2023, 1, 1, tzinfo=timezone.utc)


def make_report(
    rid: int,
    *,
    title: str = "title",
    body: str = "body",
    labels: tuple[str, ...] = (),
    created: datetime | None = None,
    closed: datetime | None = None,
    comments: tuple[str, ...] = (),
    url: str = "",
) -> BugReport:
    created = created or T0 + timedelta(days=rid)
    cs = tuple(
        Comment(id=rid * 100 + i, author=f"u{i}", body=text, created_at=created + timedelta(hours=i + 1))
        for i, text in enumerate(comments)
    )
    return BugReport(rid, title, body, frozenset(labels), created, closed, cs, url)


def brute_force_weighted_f1(votes: dict, gold: dict) -> tuple[dict, float]:
    """Independent oracle: build the full confusion matrix, then read F1 off it."""
    labels = sorted({*gold.values(), *(v for v in votes.values() if v is not None)}, key=str)
    matrix = {(g, p): 0 for g in labels for p in labels + [None]}
    for rid, g in gold.items():
        matrix[(g, votes[rid])] += 1
    f1 = {}
    for c in labels:
        tp = matrix[(c, c)]
        predicted = sum(matrix[(g, c)] for g in labels)
        actual = sum(matrix[(c, p)] for p in labels + [None])
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    n = len(gold)
    weighted = 0.0
    for c in labels:
        support = sum(1 for g in gold.values() if g == c)
        weighted += support / n * f1[c]
    return f1, weighted


S, F, U = "successful", "failed", "unparseable"
VERDICT_CASES: list[tuple[str, str]] = [
    ("The fix matches.\n\nRESEMBLES SUCCESSFUL", S),
    ("It diverges.\n\nRESEMBLES FAILED", F),
    ("RESEMBLES SUCCESSFUL", S),
    ("RESEMBLES FAILED", F),
    ("At first it RESEMBLES SUCCESSFUL, but on reflection it RESEMBLES FAILED", F),
    ("It looks like RESEMBLES FAILED territory, yet overall RESEMBLES SUCCESSFUL", S),
    ("No conclusion offered.", U),
    ("", U),
    ("resembles successful", U),
    ("Resembles Successful", U),
    ("```\nRESEMBLES SUCCESSFUL\n```", S),
    ("```text\nanalysis\nRESEMBLES FAILED\n```", F),
    ("**RESEMBLES SUCCESSFUL**", S),
    ("Verdict: RESEMBLES  SUCCESSFUL", S),
    ("Verdict: RESEMBLES\nFAILED", F),
    ("RESEMBLES SUCCESSFULLY", S),
    ("RESEMBLES", U),
    ("SUCCESSFUL", U),
    ("RESEMBLES FAILED.\n\nFinal answer: RESEMBLES SUCCESSFUL.", S),
    ('{"verdict": "RESEMBLES FAILED"}', F),
]


E2E_STEPS = ("fetch", "curate", "sample", "merge", "run", "evaluate", "report")


def run_e2e_chain(workdir: Path) -> list[dict]:
    """fetch -> curate -> sample -> merge -> run -> evaluate -> report in ``workdir`` with the mock model."""
    import contextlib
    import io
    import shutil

    from issuesupport import cli

    for name in ("config.yaml", "annotations.jsonl"):
        shutil.copy(FIXTURES / "e2e" / name, workdir / name)
    summaries = []
    for step in E2E_STEPS:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main([step, "--config", str(workdir / "config.yaml")], http_client=e2e_client())
        if code != 0:
            raise RuntimeError(f"{step} exited with {code}")
        summaries.append(json.loads(buf.getvalue().strip().splitlines()[-1]))
    return summaries
