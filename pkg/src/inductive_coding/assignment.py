"""Second pass that attaches one final theme to every segment."""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from ._checkpoint import Checkpoint, run_ordered
from ._text import normalize_phrase
from .corpus import Segment
from .gateway import ChatRequest, EmbeddingVector, Gateway, cosine_similarity
from .prompts import assignment_user_prompt

log = logging.getLogger(__name__)

FUZZY_THRESHOLD = 0.8

_ANS = re.compile(r"Ans\s*:", re.IGNORECASE)
_ENUM = re.compile(r"^\s*\d+\s*[.)]\s*")


@dataclass(frozen=True)
class ThemeAssignment:
    segment_id: str
    theme_id: str | None
    theme_phrase: str | None
    raw_answer: str
    resolution: str  # exact | fuzzy | unresolved
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if (self.theme_id is None) != (self.resolution == "unresolved"):
            raise ValueError("theme_id is None exactly when resolution is 'unresolved'")

    def to_record(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "theme_id": self.theme_id,
            "theme_phrase": self.theme_phrase,
            "resolution": self.resolution,
            "raw_answer": self.raw_answer,
            "usage": {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ThemeAssignment":
        usage = rec.get("usage") or {}
        return cls(
            rec["segment_id"], rec["theme_id"], rec.get("theme_phrase"),
            rec.get("raw_answer", ""), rec["resolution"],
            int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)),
        )


class ThemeResolver:
    """Map a free-text answer onto one of a fixed list of themes.

    Exact match on normalized text first; otherwise the most similar theme
    by embedding cosine, if that similarity is above ``threshold``.
    """

    def __init__(
        self,
        themes: Sequence[tuple[str, str]],
        embedder: Gateway | None = None,
        threshold: float = FUZZY_THRESHOLD,
    ):
        if not themes:
            raise ValueError("themes must be non-empty")
        self.themes = list(themes)
        self.embedder = embedder
        self.threshold = threshold
        self._exact: dict[str, int] = {}
        for i, (_, phrase) in enumerate(self.themes):
            self._exact.setdefault(normalize_phrase(phrase), i)
        self._vectors: list[EmbeddingVector] | None = None
        self._lock = threading.Lock()

    def _theme_vectors(self) -> list[EmbeddingVector]:
        with self._lock:
            if self._vectors is None:
                self._vectors = self.embedder.embed_batch([p for _, p in self.themes])
            return self._vectors

    def resolve(self, answer: str) -> tuple[int | None, str]:
        candidates = [answer, _ENUM.sub("", answer)]
        for cand in candidates:
            i = self._exact.get(normalize_phrase(cand))
            if i is not None:
                return i, "exact"
        text = candidates[-1].strip()
        if self.embedder is None or not normalize_phrase(text):
            return None, "unresolved"
        vec = self.embedder.embed_batch([text])[0]
        best, best_sim = None, self.threshold
        for i, tv in enumerate(self._theme_vectors()):
            sim = cosine_similarity(vec, tv)
            if sim > best_sim:
                best, best_sim = i, sim
        if best is None:
            return None, "unresolved"
        return best, "fuzzy"


def build_assignment_prompt(
    goal: str, themes: Sequence[str], segment: Segment, model_id: str = ""
) -> ChatRequest:
    if not themes:
        raise ValueError("themes must be non-empty")
    return ChatRequest(model_id, goal, assignment_user_prompt(goal, themes, segment.text))


def extract_answer(raw: str) -> str:
    """Text after the last ``Ans:`` marker, first non-empty line only."""
    marks = list(_ANS.finditer(raw))
    tail = raw[marks[-1].end():] if marks else raw
    for line in tail.splitlines():
        if line.strip():
            return line.strip()
    return ""


def parse_assignment(
    segment_id: str,
    raw: str,
    themes: Sequence[tuple[str, str]] | ThemeResolver,
    embedder: Gateway | None = None,
    threshold: float = FUZZY_THRESHOLD,
) -> ThemeAssignment:
    resolver = themes if isinstance(themes, ThemeResolver) else ThemeResolver(themes, embedder, threshold)
    answer = extract_answer(raw)
    idx, how = resolver.resolve(answer)
    if idx is None:
        return ThemeAssignment(segment_id, None, None, raw, "unresolved")
    tid, phrase = resolver.themes[idx]
    return ThemeAssignment(segment_id, tid, phrase, raw, how)


def assign_all(
    goal: str,
    themes: Sequence[tuple[str, str]],
    segments: Sequence[Segment],
    gateway: Gateway,
    embedder: Gateway | None = None,
    threshold: float = FUZZY_THRESHOLD,
    checkpoint: str | Path | None = None,
    workers: int | None = None,
) -> list[ThemeAssignment]:
    """Assign a theme to every segment, in input order.

    ``themes`` is a list of ``(theme_id, phrase)``. Any per-segment failure
    yields an unresolved assignment rather than an exception.
    """
    if not themes or not segments:
        raise ValueError("themes and segments must be non-empty")
    resolver = ThemeResolver(themes, embedder, threshold)
    phrases = [p for _, p in themes]
    system = goal

    def work(seg: Segment) -> ThemeAssignment:
        req = gateway.request(system, assignment_user_prompt(goal, phrases, seg.text))
        try:
            resp = gateway.complete(req)
        except Exception as exc:  # noqa: BLE001 - recorded as unresolved
            log.warning("segment %s: assignment failed: %s", seg.segment_id, exc)
            return ThemeAssignment(seg.segment_id, None, None, "", "unresolved")
        try:
            a = parse_assignment(seg.segment_id, resp.text, resolver)
        except Exception as exc:  # noqa: BLE001 - embedder failure during fuzzy matching
            log.warning("segment %s: answer resolution failed: %s", seg.segment_id, exc)
            a = ThemeAssignment(seg.segment_id, None, None, resp.text, "unresolved")
        return replace(a, prompt_tokens=resp.prompt_tokens, completion_tokens=resp.completion_tokens)

    ckpt = Checkpoint(checkpoint, key="segment_id") if checkpoint else None
    return run_ordered(
        segments,
        key=lambda s: s.segment_id,
        work=work,
        to_record=ThemeAssignment.to_record,
        from_record=ThemeAssignment.from_record,
        checkpoint=ckpt,
        workers=workers or gateway.cfg.max_concurrency,
    )


def unresolved_rate(assignments: Sequence[ThemeAssignment]) -> float:
    if not assignments:
        return 0.0
    return sum(a.resolution == "unresolved" for a in assignments) / len(assignments)
