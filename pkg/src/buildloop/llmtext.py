"""Lenient extraction of structured data from free-form model output."""

from __future__ import annotations

import json
import re
from typing import Any

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)


def fenced_blocks(text: str) -> list[tuple[str, str]]:
    """All fenced code blocks as (label, body) pairs, in document order.

    The body keeps interior newlines verbatim; the single newline before the
    closing fence is stripped so that wrapping and extracting round-trips.
    """
    blocks = []
    for match in _FENCE_RE.finditer(text):
        label = match.group(1).strip().lower()
        body = match.group(2)
        if body.endswith("\n"):
            body = body[:-1]
        blocks.append((label, body))
    return blocks


def extract_json(text: str) -> Any | None:
    """First parseable JSON object or array found in `text`, else None.

    Models wrap JSON in prose and code fences unpredictably, so this scans
    every opening brace/bracket and asks the decoder to read from there.
    """
    decoder = json.JSONDecoder()
    for match in re.finditer(r"[{\[]", text):
        try:
            value, _ = decoder.raw_decode(text, match.start())
        except ValueError:
            continue
        if isinstance(value, (dict, list)):
            return value
    return None


def find_bool(text: str, *names: str) -> bool | None:
    """Scan for `name: true/false` style assignments outside JSON."""
    for name in names:
        m = re.search(
            rf"{re.escape(name)}\W{{0,4}}(true|false|yes|no|pass|fail)\b",
            text,
            re.IGNORECASE,
        )
        if m:
            return m.group(1).lower() in ("true", "yes", "pass")
    return None
