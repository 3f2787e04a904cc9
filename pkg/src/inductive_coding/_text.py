"""Small text helpers shared by the parsing stages."""

from __future__ import annotations

import json
import re
import unicodedata

_WS = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_phrase(phrase: str) -> str:
    """Lowercase, collapse whitespace and strip punctuation at both ends.

    This is the identity used to compare labels and theme names everywhere.
    """
    s = _WS.sub(" ", unicodedata.normalize("NFC", phrase).lower()).strip()
    start, end = 0, len(s)
    while start < end and (_is_punct(s[start]) or s[start].isspace()):
        start += 1
    while end > start and (_is_punct(s[end - 1]) or s[end - 1].isspace()):
        end -= 1
    return s[start:end]


def _balanced_end(text: str, start: int) -> int:
    depth = 0
    in_str = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return -1


def iter_json_objects(text: str):
    """Yield top-level balanced ``{...}`` spans, left to right.

    Braces inside JSON string literals are ignored. Nested objects are never
    yielded on their own, and an unbalanced brace ends the scan: a truncated
    outer object must not surface one of its inner objects as the answer.
    """
    pos = text.find("{")
    while pos != -1:
        end = _balanced_end(text, pos)
        if end == -1:
            return
        yield text[pos : end + 1]
        pos = text.find("{", end + 1)


def extract_json_object(text: str) -> str | None:
    for span in iter_json_objects(text):
        return span
    return None


def loads_object(text: str, object_pairs_hook=None) -> dict:
    """Parse the first JSON object embedded in model prose.

    Code fences and surrounding chatter are tolerated. Raises ``ValueError``
    when no candidate span parses to an object.
    """
    last_error = "no JSON object found"
    for span in iter_json_objects(text):
        for candidate in (span, re.sub(r",\s*([\]}])", r"\1", span)):
            try:
                value = json.loads(candidate, object_pairs_hook=object_pairs_hook)
            except json.JSONDecodeError as exc:
                last_error = f"invalid JSON object: {exc}"
                continue
            if isinstance(value, dict):
                return value
            last_error = "top-level JSON value is not an object"
    raise ValueError(last_error)
