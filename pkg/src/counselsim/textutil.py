"""Small text helpers shared by the parsers."""

from __future__ import annotations

import re

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\s*\n?|\n?```\s*$")


def strip_code_fences(text: str) -> str:
    """Drop surrounding Markdown code fences, if any.

    Generators are told not to emit Markdown but routinely do anyway, so
    every JSON parser in the pipeline runs its input through this first.
    """
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = _FENCE_RE.sub("", stripped)
    return stripped.strip()


def extract_json_payload(text: str) -> str:
    """Best-effort slice of the first JSON object or array in ``text``."""
    stripped = strip_code_fences(text)
    if stripped.startswith(("{", "[")):
        return stripped
    for opener, closer in (("{", "}"), ("[", "]")):
        start = stripped.find(opener)
        end = stripped.rfind(closer)
        if start != -1 and end > start:
            return stripped[start : end + 1]
    return stripped
