"""Root-cause taxonomy of invalid bug reports and the outlier labels used in annotation."""

from __future__ import annotations

import re
from enum import Enum

from .errors import UnknownOutlier, UnknownSubclass


class InvalidSubclass(str, Enum):
    EXTERNAL_SYSTEM_DEPENDENCY = "external_system_dependency_issues"
    FAULTY_CONFIGURATION = "faulty_configuration_environment_setup"
    FEATURE_REQUEST = "feature_request"
    NON_REPRODUCIBILITY = "non_reproducibility"
    QUESTION = "question"
    WORKING_AS_DESIGNED = "working_as_designed"
    WRONG_VERSION = "wrong_version"

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @property
    def guideline(self) -> str:
        return _GUIDELINES[self]


class OutlierLabel(str, Enum):
    VALID = "valid"
    NO_CONCLUSION = "no_conclusion"
    DEVELOPER_WORKFLOW = "developer_workflow"
    DUPLICATE = "duplicate"

    @property
    def display_name(self) -> str:
        return self.value.replace("_", " ").title()


# Canonical row order; every report emitter and prompt iterates in this order.
SUBCLASS_ORDER: tuple[InvalidSubclass, ...] = tuple(InvalidSubclass)

_DISPLAY = {
    InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY: "External System & Dependency Issues",
    InvalidSubclass.FAULTY_CONFIGURATION: "Faulty Configuration & Environment Setup",
    InvalidSubclass.FEATURE_REQUEST: "Feature Request",
    InvalidSubclass.NON_REPRODUCIBILITY: "Non-reproducibility",
    InvalidSubclass.QUESTION: "Question",
    InvalidSubclass.WORKING_AS_DESIGNED: "Working as Designed (Conflicting Expectation)",
    InvalidSubclass.WRONG_VERSION: "Wrong Version (Already Fixed)",
}

_DESCRIPTIONS = {
    InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY: (
        "Failure triggered by defects, outages, or hard limitations in third-party systems "
        "or hardware outside the reporters' control."
    ),
    InvalidSubclass.FAULTY_CONFIGURATION: (
        "Incorrect user-side setting, parameter, or local environment mismatches before the testing."
    ),
    InvalidSubclass.FEATURE_REQUEST: (
        "User requests new functionality or enhancements rather than identifying a fault in "
        "the existing code."
    ),
    InvalidSubclass.NON_REPRODUCIBILITY: (
        "Cannot recreate the bug due to missing steps, race conditions, or one-time occurrences."
    ),
    InvalidSubclass.QUESTION: (
        "The report is an inquiry seeking help or discussion rather than a functional defect."
    ),
    InvalidSubclass.WORKING_AS_DESIGNED: (
        "Software functions according to specifications, but the user perceives the correct "
        "behavior as a defect due to conflicting expectations."
    ),
    InvalidSubclass.WRONG_VERSION: (
        "Issue exists in an outdated or unsupported version but is already resolved in a newer release."
    ),
}

_GUIDELINES = {
    InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY: (
        "Direct the user to the relevant third-party system and explain that the issue "
        "originates from an external dependency."
    ),
    InvalidSubclass.FAULTY_CONFIGURATION: (
        "Explain why the problem arises. Describe the required configuration and how to apply "
        "the necessary modifications."
    ),
    InvalidSubclass.FEATURE_REQUEST: (
        "Inform the user that the report is a feature request rather than a bug. If there is a "
        "workaround solution, explain it. Then, decide whether to implement the requested "
        "feature and notify users accordingly."
    ),
    InvalidSubclass.NON_REPRODUCIBILITY: (
        "Ask the user for a detailed description, Steps to Reproduce (S2R), Expected Behavior "
        "(EB), Observed Behavior (OB), and complete environmental details if any of them are "
        "missing. If they are already known, but the bug exhibits intermittent behavior, "
        "suggest trying again at a different time."
    ),
    InvalidSubclass.QUESTION: (
        "Provide a solution if available, or inform the user if the question cannot be answered."
    ),
    InvalidSubclass.WORKING_AS_DESIGNED: (
        "Explain the system or specific feature in natural language."
    ),
    InvalidSubclass.WRONG_VERSION: (
        "Inform the user that the issue has already been resolved in a newer version and kindly "
        "request that the user updates to that version."
    ),
}


def _norm(label: str) -> str:
    return re.sub(r"[^a-z0-9]", "", label.lower())


def _strip_parenthetical(label: str) -> str:
    return re.sub(r"\(.*?\)", "", label)


_SUBCLASS_ALIASES: dict[str, InvalidSubclass] = {}
for _s in InvalidSubclass:
    for _alias in (_s.value, _s.name, _DISPLAY[_s], _strip_parenthetical(_DISPLAY[_s])):
        _SUBCLASS_ALIASES[_norm(_alias)] = _s
# Short forms used in running text and commonly echoed back by models.
for _alias, _s in {
    "external_system_dependency": InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY,
    "external_system": InvalidSubclass.EXTERNAL_SYSTEM_DEPENDENCY,
    "faulty_configuration": InvalidSubclass.FAULTY_CONFIGURATION,
    "non_reproducible": InvalidSubclass.NON_REPRODUCIBILITY,
    "non_reproducibility_intermittency": InvalidSubclass.NON_REPRODUCIBILITY,
    "wrong_version_already_fixed": InvalidSubclass.WRONG_VERSION,
    "working_as_designed_conflicting_expectation": InvalidSubclass.WORKING_AS_DESIGNED,
    "working_as_designed_conflicting_expectations": InvalidSubclass.WORKING_AS_DESIGNED,
}.items():
    _SUBCLASS_ALIASES[_norm(_alias)] = _s

_OUTLIER_ALIASES = {_norm(o.value): o for o in OutlierLabel} | {_norm(o.name): o for o in OutlierLabel}

assert not set(_SUBCLASS_ALIASES) & set(_OUTLIER_ALIASES)


def parse_subclass(label: str) -> InvalidSubclass:
    """Match ``label`` to a subclass ignoring case, whitespace, and punctuation."""
    if not isinstance(label, str):
        raise UnknownSubclass(repr(label))
    try:
        return _SUBCLASS_ALIASES[_norm(label)]
    except KeyError:
        raise UnknownSubclass(label) from None


def parse_outlier(label: str) -> OutlierLabel:
    try:
        return _OUTLIER_ALIASES[_norm(label)]
    except KeyError:
        raise UnknownOutlier(label) from None


def parse_gold_label(label: str) -> InvalidSubclass | OutlierLabel:
    """Parse either a subclass or an outlier label (the two sets are disjoint)."""
    try:
        return parse_subclass(label)
    except UnknownSubclass:
        pass
    try:
        return parse_outlier(label)
    except UnknownOutlier:
        raise UnknownSubclass(label) from None


def guideline_for(subclass: InvalidSubclass) -> str:
    return _GUIDELINES[InvalidSubclass(subclass)]


def canonical_name(label: InvalidSubclass | OutlierLabel) -> str:
    return label.value
