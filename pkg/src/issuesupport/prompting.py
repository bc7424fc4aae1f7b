"""Prompt assembly for the four pipeline modes and parsing of the model's JSON answer."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Any, Iterable

from .errors import ContextMismatch, LeakageError, MissingField, ParseFailure, UnknownSubclass
from .models import BugReport, RetrievedContext, format_timestamp
from .taxonomy import SUBCLASS_ORDER, InvalidSubclass, parse_subclass


class PipelineMode(str, Enum):
    VANILLA = "vanilla"
    WITHOUT_PRIORS = "without_priors"
    RAG = "rag"
    AGENTIC_SEARCH = "agentic_search"

    @property
    def uses_taxonomy(self) -> bool:
        return self is not PipelineMode.WITHOUT_PRIORS

    @property
    def uses_context(self) -> bool:
        return self in (PipelineMode.RAG, PipelineMode.AGENTIC_SEARCH)


def parse_mode(value: str) -> PipelineMode:
    key = value.strip().lower().replace("-", "_")
    aliases = {"agentic": PipelineMode.AGENTIC_SEARCH, "search": PipelineMode.AGENTIC_SEARCH, "no_priors": PipelineMode.WITHOUT_PRIORS}
    if key in aliases:
        return aliases[key]
    return PipelineMode(key)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Read ``prompts/<name>.txt``; the single trailing newline of the file is dropped."""
    text = resources.files("issuesupport").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def template_names() -> list[str]:
    root = resources.files("issuesupport").joinpath("prompts")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def template_hash() -> str:
    """Digest over every prompt asset, recorded with each run for provenance."""
    h = hashlib.sha256()
    for name in template_names():
        h.update(name.encode())
        h.update(b"\0")
        h.update(load_template(name).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def render(name: str, **values: Any) -> str:
    return Template(load_template(name)).substitute(**values)


def taxonomy_block() -> str:
    return "\n\n".join(
        render(
            "taxonomy_entry",
            identifier=s.value,
            display_name=s.display_name,
            description=s.description,
            guideline=s.guideline,
        )
        for s in SUBCLASS_ORDER
    )


def build_system_prompt(mode: PipelineMode) -> str:
    if mode is PipelineMode.WITHOUT_PRIORS:
        return load_template("system_without_priors")
    return render("system_taxonomy", taxonomy=taxonomy_block())


def _render_evidence(context: RetrievedContext) -> str:
    if not context.items:
        return render("user_evidence", count=0, items="(no evidence was found)")
    items = "\n\n".join(
        render(
            "evidence_item",
            rank=i,
            source=f"{item.corpus}:{item.doc_id}",
            timestamp=format_timestamp(item.created_at) or "n/a",
            text=item.text,
        )
        for i, item in enumerate(context.items, 1)
    )
    return render("user_evidence", count=len(context.items), items=items)


def build_user_prompt(report: BugReport, context: RetrievedContext | None, mode: PipelineMode) -> str:
    if mode.uses_context and context is None:
        raise ContextMismatch(f"{mode.value} needs retrieved context")
    if not mode.uses_context and context is not None:
        raise ContextMismatch(f"{mode.value} takes no retrieved context")
    prompt = render("user_report", title=report.title, body=report.body)
    if context is not None:
        prompt += "\n" + _render_evidence(context)
    return prompt


# Shorter snippets match too easily by coincidence (boilerplate like "Thanks!").
LEAKAGE_MIN_CHARS = 40


def check_no_leakage(prompt: str, secrets: Iterable[str], min_chars: int = LEAKAGE_MIN_CHARS) -> None:
    """Raise LeakageError if any ground-truth text appears verbatim in ``prompt``."""
    for secret in secrets:
        s = secret.strip()
        if len(s) >= min_chars and s in prompt:
            raise LeakageError(f"prompt contains ground-truth text: {s[:60]!r}...")


# --- output parsing -----------------------------------------------------------

_FENCE = re.compile(r"```[A-Za-z0-9_-]*\s*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class ParsedOutput:
    classification: InvalidSubclass | None
    reasoning: str
    no_code_fix: str


def _candidate_objects(raw: str) -> Iterable[Any]:
    texts = [m.group(1) for m in _FENCE.finditer(raw)] + [raw]
    decoder = json.JSONDecoder()
    for text in texts:
        start, end = text.find("{"), text.rfind("}")
        if start == -1 or end <= start:
            continue
        try:
            yield json.loads(text[start : end + 1])
            continue
        except json.JSONDecodeError:
            pass
        for m in re.finditer(r"\{", text):
            try:
                obj, _ = decoder.raw_decode(text, m.start())
            except json.JSONDecodeError:
                continue
            yield obj
            break


def _field(obj: dict[str, Any], name: str) -> str:
    if name not in obj or obj[name] is None:
        raise MissingField(name)
    value = obj[name]
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "\n".join(str(v) for v in value)
    return json.dumps(value, ensure_ascii=False) if isinstance(value, dict) else str(value)


def parse_model_output(raw: str, mode: PipelineMode) -> ParsedOutput:
    obj = next((o for o in _candidate_objects(raw) if isinstance(o, dict)), None)
    if obj is None:
        raise ParseFailure(raw)
    classification = None
    if mode.uses_taxonomy:
        classification = parse_subclass(_field(obj, "classification"))
    return ParsedOutput(classification, _field(obj, "reasoning"), _field(obj, "no_code_fix"))


def serialize_output(parsed: ParsedOutput, mode: PipelineMode) -> str:
    payload: dict[str, Any] = {}
    if mode.uses_taxonomy:
        if parsed.classification is None:
            raise ValueError("taxonomy modes need a classification")
        payload["classification"] = parsed.classification.value
    payload["reasoning"] = parsed.reasoning
    payload["no_code_fix"] = parsed.no_code_fix
    return json.dumps(payload, ensure_ascii=False)


@dataclass(frozen=True)
class PredictionRecord:
    report_id: int
    run_index: int
    mode: PipelineMode
    classification: InvalidSubclass | None
    reasoning: str
    no_code_fix: str
    raw_output: str
    parse_error: str | None = None

    @property
    def parsed(self) -> bool:
        return self.parse_error is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "run_index": self.run_index,
            "mode": self.mode.value,
            "classification": self.classification.value if self.classification else None,
            "reasoning": self.reasoning,
            "no_code_fix": self.no_code_fix,
            "raw_output": self.raw_output,
            "parse_error": self.parse_error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PredictionRecord":
        return cls(
            report_id=int(d["report_id"]),
            run_index=int(d["run_index"]),
            mode=PipelineMode(d["mode"]),
            classification=InvalidSubclass(d["classification"]) if d.get("classification") else None,
            reasoning=d.get("reasoning") or "",
            no_code_fix=d.get("no_code_fix") or "",
            raw_output=d.get("raw_output") or "",
            parse_error=d.get("parse_error"),
        )


def to_prediction(report_id: int, run_index: int, mode: PipelineMode, raw: str) -> PredictionRecord:
    """Parse one model reply; a failed parse still yields a (blank) run so run counts stay exact."""
    try:
        p = parse_model_output(raw, mode)
    except (ParseFailure, MissingField, UnknownSubclass) as exc:
        return PredictionRecord(report_id, run_index, mode, None, "", "", raw, f"{type(exc).__name__}: {exc}")
    return PredictionRecord(report_id, run_index, mode, p.classification, p.reasoning, p.no_code_fix, raw)
