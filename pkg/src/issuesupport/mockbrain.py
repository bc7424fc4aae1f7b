"""Rule-based replies used by the offline mock model.

Every reply is a pure function of the prompts, which keeps mock runs
byte-reproducible while still exercising every parser downstream.
"""

from __future__ import annotations

import json
import re

from .prompting import PipelineMode, build_system_prompt, load_template, render
from .retrieval import tokenize
from .taxonomy import InvalidSubclass

# Checked in order; the first cue found in the report decides the label.
_CUES: tuple[tuple[InvalidSubclass, tuple[str, ...]], ...] = (
    (InvalidSubclass.WRONG_VERSION, ("already fixed", "older version", "outdated", "nightly", "update to", "upgrade")),
    (InvalidSubclass.FEATURE_REQUEST, ("feature", "would be nice", "please add", "support for", "option to")),
    (InvalidSubclass.NON_REPRODUCIBILITY, ("sometimes", "randomly", "intermittent", "once", "cannot reproduce", "can't reproduce")),
    (InvalidSubclass.QUESTION, ("how do i", "how can i", "is it possible", "question", "why does")),
    (InvalidSubclass.FAULTY_CONFIGURATION, ("setting", "config", "flag", "profile", "extension", "proxy", "policy")),
    (InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY, ("website", "site", "server", "third-party", "google", "driver", "outage")),
)


def _report_text(user_prompt: str) -> str:
    head = user_prompt.split("=====", 1)[0]
    return head.lower()


def classify(text: str) -> InvalidSubclass:
    for label, cues in _CUES:
        if any(c in text for c in cues):
            return label
    return InvalidSubclass.WORKING_AS_DESIGNED


def _title(user_prompt: str) -> str:
    m = re.search(r"Issue title:\n(.*)", user_prompt)
    return m.group(1).strip() if m else ""


def _overlap(a: str, b: str) -> float:
    ta, tb = set(tokenize(a)), set(tokenize(b))
    return len(ta & tb) / len(ta | tb) if ta | tb else 0.0


def _judge(user_prompt: str) -> str:
    m = re.search(r"Suggested Fix:\n(.*?)\n\nGround Truth Successful Fix:\n(.*?)\n\nGround Truth Failed Fix:\n(.*?)\n\nDoes the suggested", user_prompt, re.DOTALL)
    if not m:
        return "The prompt could not be read."
    pred, succ, failed = m.groups()
    s, f = _overlap(pred, succ), _overlap(pred, failed)
    verdict = "RESEMBLES SUCCESSFUL" if s >= f and s > 0.02 else "RESEMBLES FAILED"
    return f"Overlap with successful fix: {s:.3f}\nOverlap with failed fix: {f:.3f}\n\n{verdict}"


def _fix_for(label: InvalidSubclass | None, title: str) -> str:
    if label is None:
        return f"Thanks for reporting \"{title}\". Please check your settings, update to the latest version and tell us if the problem remains."
    return f"Regarding \"{title}\": {label.guideline}"


def respond(system_prompt: str, user_prompt: str) -> str:
    if system_prompt == load_template("judge_system"):
        return _judge(user_prompt)
    title = _title(user_prompt)
    if system_prompt == build_system_prompt(PipelineMode.WITHOUT_PRIORS):
        return json.dumps(
            {"reasoning": "The report describes behavior that needs no code change.", "no_code_fix": _fix_for(None, title)},
            ensure_ascii=False,
        )
    if system_prompt == build_system_prompt(PipelineMode.VANILLA):
        label = classify(_report_text(user_prompt))
        return json.dumps(
            {
                "classification": label.value,
                "reasoning": f"Cue words in the report point to {label.display_name}.",
                "no_code_fix": _fix_for(label, title),
            },
            ensure_ascii=False,
        )
    if system_prompt.startswith(render("agent_system", max_searches="X", max_visits="X", max_turns="X").split("\n", 1)[0]):
        if "Web results for:" in user_prompt or "tool error" in user_prompt:
            return json.dumps({"action": "finish"})
        m = re.search(r"Title: (.*)", user_prompt)
        return json.dumps({"action": "search", "query": (m.group(1) if m else "issue").strip() or "issue"})
    if system_prompt == load_template("summarizer_system"):
        page = user_prompt.split("Page text:\n", 1)[-1]
        return page[:600]
    return "ok"
