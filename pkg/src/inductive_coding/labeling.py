"""Per-segment label generation and the ``LABEL: [...]`` output grammar."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ._checkpoint import Checkpoint, run_ordered
from ._text import normalize_phrase
from .corpus import Segment
from .errors import LabelParseError
from .gateway import ChatRequest, Gateway
from .prompts import generation_system_prompt

log = logging.getLogger(__name__)

MAX_LABEL_WORDS = 5
IRRELEVANT = "irrelevant"

_LABEL_RE = re.compile(r"LABEL\s*:\s*\[([^\]\n]*)\]", re.IGNORECASE)


@dataclass(frozen=True)
class TaskSpec:
    background_info: str
    coding_goal: str

    def __post_init__(self):
        if not self.background_info.strip() or not self.coding_goal.strip():
            raise ValueError("background_info and coding_goal must be non-empty")


@dataclass(frozen=True)
class GeneratedLabel:
    phrase: str
    normalized: str

    @classmethod
    def from_phrase(cls, phrase: str) -> "GeneratedLabel":
        return cls(phrase.strip(), normalize_phrase(phrase))

    @property
    def word_count(self) -> int:
        return len(self.normalized.split())

    @property
    def over_length(self) -> bool:
        return self.word_count > MAX_LABEL_WORDS


@dataclass
class LabelParse:
    labels: list[GeneratedLabel]
    irrelevant: bool
    anomalies: list[str] = field(default_factory=list)


@dataclass
class SegmentAnnotation:
    segment_id: str
    labels: list[GeneratedLabel]
    irrelevant: bool
    raw_response: str
    failed: bool = False
    error: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.failed:
            if self.labels or self.irrelevant:
                raise ValueError("failed annotations carry no labels")
        elif self.irrelevant == bool(self.labels):
            raise ValueError("an annotation is either irrelevant or has labels")

    def to_record(self) -> dict:
        rec = {
            "segment_id": self.segment_id,
            "irrelevant": self.irrelevant,
            "labels": [lab.phrase for lab in self.labels],
            "normalized": [lab.normalized for lab in self.labels],
            "raw_response": self.raw_response,
            "failed": self.failed,
            "usage": {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens},
        }
        if self.error:
            rec["error"] = self.error
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SegmentAnnotation":
        labels = [GeneratedLabel(p, n) for p, n in zip(rec["labels"], rec["normalized"])]
        usage = rec.get("usage") or {}
        return cls(
            rec["segment_id"],
            labels,
            bool(rec["irrelevant"]),
            rec.get("raw_response", ""),
            bool(rec.get("failed", False)),
            rec.get("error"),
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )


def build_generation_prompt(task: TaskSpec, segment: Segment, model_id: str = "") -> ChatRequest:
    return ChatRequest(
        model_id=model_id,
        system_prompt=generation_system_prompt(task.background_info, task.coding_goal),
        user_prompt=segment.text,
    )


def parse_label_lines(raw: str) -> LabelParse:
    """Parse every ``LABEL: [phrase]`` occurrence in a model response.

    Text around the label markers is ignored. Duplicate phrases (after
    normalization) collapse to the first occurrence. A response whose only
    label is ``Irrelevant`` is irrelevant; ``Irrelevant`` next to real
    labels is dropped and reported as an anomaly. No parseable label at all
    raises :class:`LabelParseError`.
    """
    labels: list[GeneratedLabel] = []
    anomalies: list[str] = []
    seen: set[str] = set()
    saw_irrelevant = False
    for m in _LABEL_RE.finditer(raw):
        lab = GeneratedLabel.from_phrase(m.group(1))
        if not lab.normalized:
            anomalies.append(f"empty label {m.group(0)!r}")
            continue
        if lab.normalized == IRRELEVANT:
            saw_irrelevant = True
            continue
        if lab.normalized in seen:
            continue
        seen.add(lab.normalized)
        labels.append(lab)
        if lab.over_length:
            anomalies.append(f"label exceeds {MAX_LABEL_WORDS} words: {lab.phrase!r}")

    if labels:
        if saw_irrelevant:
            anomalies.append("Irrelevant marker mixed with real labels; kept the real labels")
        return LabelParse(labels, False, anomalies)
    if saw_irrelevant:
        return LabelParse([], True, anomalies)
    raise LabelParseError(f"no LABEL lines in response: {raw[:120]!r}")


def render_label_lines(parsed: LabelParse) -> str:
    if parsed.irrelevant:
        return "LABEL: [Irrelevant]"
    return "\n".join(f"LABEL: [{lab.phrase}]" for lab in parsed.labels)


def annotate_segment(task: TaskSpec, segment: Segment, gateway: Gateway) -> SegmentAnnotation:
    """Label one segment; a parse failure is retried once, then recorded as failed."""
    base = build_generation_prompt(task, segment, gateway.cfg.model_id)
    sid = segment.segment_id
    raw = ""
    error = ""
    usage = [0, 0]
    for attempt in range(2):
        req = gateway.request(base.system_prompt, base.user_prompt, attempt=attempt)
        try:
            resp = gateway.complete(req)
        except Exception as exc:  # noqa: BLE001 - any provider failure becomes a placeholder
            log.warning("segment %s: gateway failure: %s", sid, exc)
            error = str(exc)
            break
        raw = resp.text
        usage[0] += resp.prompt_tokens
        usage[1] += resp.completion_tokens
        try:
            parsed = parse_label_lines(raw)
        except LabelParseError as exc:
            error = str(exc)
            continue
        for note in parsed.anomalies:
            log.info("segment %s: %s", sid, note)
        return SegmentAnnotation(sid, parsed.labels, parsed.irrelevant, raw, False, None, *usage)
    return SegmentAnnotation(sid, [], False, raw, True, error, *usage)


def generate_labels(
    task: TaskSpec,
    segments: Sequence[Segment],
    gateway: Gateway,
    checkpoint: str | Path | None = None,
    workers: int | None = None,
) -> list[SegmentAnnotation]:
    """Annotate every segment, in input order.

    With ``checkpoint`` set, each finished annotation is appended to that
    file as it completes, and segments already present there are not sent
    to the model again.
    """
    if not segments:
        raise ValueError("segments must be non-empty")
    ckpt = Checkpoint(checkpoint, key="segment_id") if checkpoint else None
    return run_ordered(
        segments,
        key=lambda s: s.segment_id,
        work=lambda s: annotate_segment(task, s, gateway),
        to_record=SegmentAnnotation.to_record,
        from_record=SegmentAnnotation.from_record,
        checkpoint=ckpt,
        workers=workers or gateway.cfg.max_concurrency,
    )


def label_pool(annotations: Iterable[SegmentAnnotation]) -> list[tuple[str, list[str]]]:
    """Group identical normalized labels, keeping every segment reference.

    Entries appear in order of first occurrence; irrelevant and failed
    annotations contribute nothing.
    """
    pool: dict[str, list[str]] = {}
    for ann in annotations:
        if ann.irrelevant or ann.failed:
            continue
        for lab in ann.labels:
            ids = pool.setdefault(lab.normalized, [])
            if not ids or ids[-1] != ann.segment_id:
                ids.append(ann.segment_id)
    return list(pool.items())
