"""Document loading and deterministic segmentation."""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

from .errors import CorpusError, EmptySegmentationError
from .storage import read_jsonl, write_jsonl

_BLANK_LINES = re.compile(r"\n[ \t\f\v]*\n\s*")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _canonical(text: str) -> str:
    return unicodedata.normalize("NFC", text.replace("\r\n", "\n").replace("\r", "\n"))


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_ref: str
    raw_text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Segment:
    segment_id: str
    doc_id: str
    position: int
    text: str

    @property
    def char_length(self) -> int:
        return len(self.text)

    def to_record(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "doc_id": self.doc_id,
            "position": self.position,
            "text": self.text,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Segment":
        return cls(rec["segment_id"], rec["doc_id"], int(rec["position"]), rec["text"])


@dataclass(frozen=True)
class SegmentationPolicy:
    mode: Literal["paragraph", "whole-document"] = "paragraph"
    min_chars: int = 1
    max_chars: int = 4000

    def __post_init__(self):
        if self.mode not in ("paragraph", "whole-document"):
            raise ValueError(f"unknown segmentation mode {self.mode!r}")
        if self.min_chars < 1:
            raise ValueError("min_chars must be >= 1")
        if self.max_chars <= self.min_chars:
            raise ValueError("max_chars must exceed min_chars")


def _document(doc_id, text, source_ref, meta, where: str, errors: list[str]) -> Document | None:
    if not isinstance(doc_id, str) or not doc_id:
        errors.append(f"{where}: field 'id' must be a non-empty string")
        return None
    if not isinstance(text, str):
        errors.append(f"{where}: field 'text' must be a string")
        return None
    text = _canonical(text)
    if not text.strip():
        errors.append(f"{where}: document {doc_id!r} has empty text")
        return None
    if meta is None:
        meta = {}
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        errors.append(f"{where}: field 'meta' must map strings to strings")
        return None
    return Document(doc_id, source_ref, text, dict(meta))


def _read_jsonl(path: Path, errors: list[str]) -> Iterable[Document]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"{where}: invalid JSON ({exc.msg})")
                continue
            if not isinstance(rec, dict):
                errors.append(f"{where}: record is not an object")
                continue
            missing = [k for k in ("id", "text") if k not in rec]
            if missing:
                errors.append(f"{where}: missing field(s) {', '.join(missing)}")
                continue
            doc = _document(rec["id"], rec["text"], where, rec.get("meta"), where, errors)
            if doc is not None:
                yield doc


def _read_text_dir(path: Path, errors: list[str]) -> Iterable[Document]:
    for f in sorted(path.glob("*.txt")):
        doc = _document(f.stem, f.read_text(encoding="utf-8"), str(f), None, f.name, errors)
        if doc is not None:
            yield doc


def load_corpus(path: str | Path, format: str = "jsonl") -> list[Document]:
    """Load documents from a jsonl file or a directory of ``.txt`` files.

    Every problem found is collected; a :class:`CorpusError` listing all of
    them (with line numbers for jsonl) is raised if there was any.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError([f"{path}: no such file or directory"])
    errors: list[str] = []
    if format == "jsonl":
        docs = list(_read_jsonl(path, errors))
    elif format == "text-directory":
        if not path.is_dir():
            raise CorpusError([f"{path}: not a directory"])
        docs = list(_read_text_dir(path, errors))
    else:
        raise CorpusError([f"unknown corpus format {format!r}"])

    seen: dict[str, str] = {}
    for doc in docs:
        if doc.doc_id in seen:
            errors.append(
                f"{doc.source_ref}: duplicate id {doc.doc_id!r} (first seen at {seen[doc.doc_id]})"
            )
        else:
            seen[doc.doc_id] = doc.source_ref
    if errors:
        raise CorpusError(errors)
    return docs


def _split_oversize(text: str, max_chars: int) -> list[str]:
    if len(text) <= max_chars:
        return [text]
    pieces: list[str] = []
    current = ""
    for sentence in _SENTENCE_END.split(text):
        while len(sentence) > max_chars:
            # a single sentence longer than the bound: hard cut
            if current:
                pieces.append(current)
                current = ""
            pieces.append(sentence[:max_chars].rstrip())
            sentence = sentence[max_chars:].lstrip()
        if not sentence:
            continue
        if current and len(current) + 1 + len(sentence) > max_chars:
            pieces.append(current)
            current = sentence
        else:
            current = f"{current} {sentence}" if current else sentence
    if current:
        pieces.append(current)
    return [p for p in pieces if p]


def _paragraphs(text: str, min_chars: int) -> list[str]:
    paras = [p.strip() for p in _BLANK_LINES.split(text)]
    paras = [p for p in paras if p]
    out: list[str] = []
    pending = ""
    for p in paras:
        if pending:
            p = f"{pending}\n\n{p}"
            pending = ""
        if len(p) < min_chars:
            pending = p
        else:
            out.append(p)
    if pending:
        if out:
            out[-1] = f"{out[-1]}\n\n{pending}"
        else:
            out.append(pending)
    return out


def segment_document(doc: Document, policy: SegmentationPolicy) -> list[Segment]:
    text = _canonical(doc.raw_text)
    if policy.mode == "whole-document":
        bodies = [text.strip()] if text.strip() else []
    else:
        bodies = [
            piece
            for para in _paragraphs(text, policy.min_chars)
            for piece in _split_oversize(para, policy.max_chars)
        ]
    if not bodies:
        raise EmptySegmentationError(doc.doc_id)
    return [Segment(f"{doc.doc_id}:{i}", doc.doc_id, i, body) for i, body in enumerate(bodies)]


def segment_corpus(docs: Iterable[Document], policy: SegmentationPolicy) -> list[Segment]:
    segments: list[Segment] = []
    for doc in docs:
        segments.extend(segment_document(doc, policy))
    return segments


def write_segments(segments: Iterable[Segment], path: str | Path) -> None:
    write_jsonl(path, (s.to_record() for s in segments))


def read_segments(path: str | Path) -> list[Segment]:
    return [Segment.from_record(r) for r in read_jsonl(path)]
