"""Triage of invalid bug reports: benchmark curation, LLM pipelines and evaluation."""

from .models import BenchmarkRecord, BugReport, Comment, FixOutcome, NoCodeFix
from .taxonomy import InvalidSubclass, OutlierLabel, parse_subclass

__all__ = [
    "BenchmarkRecord",
    "BugReport",
    "Comment",
    "FixOutcome",
    "InvalidSubclass",
    "NoCodeFix",
    "OutlierLabel",
    "parse_subclass",
]

__version__ = "0.1.0"
