"""Incremental codebook baseline: sample, generate, merge, drop.

This mimics the way a human coder drafts a codebook on a sample and then
revises it while reading more data. Each full iteration labels a fresh
random sample, folds the new codes into the codebook, asks the model to
merge related codes, and drops codes that keep too little support. After
the full phase, merge and drop repeat on their own until every code is
sufficiently supported.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from ._text import loads_object, normalize_phrase
from .corpus import Segment
from .errors import MergeParseError
from .gateway import ChatRequest, Gateway
from .labeling import TaskSpec, generate_labels
from .prompts import merge_system_prompt, merge_user_prompt

log = logging.getLogger(__name__)


@dataclass
class CodebookEntry:
    code: str
    example_segment_id: str
    segment_ids: list[str]
    low_support_age: int = 0

    def to_record(self) -> dict:
        return {
            "code": self.code,
            "example_segment_id": self.example_segment_id,
            "segment_ids": list(self.segment_ids),
            "low_support_age": self.low_support_age,
        }


@dataclass(frozen=True)
class IncrementalConfig:
    first_sample: int = 32
    later_sample: int = 48
    full_phase_iterations: int = 10
    drop_support: int = 1
    drop_age: int = 2
    min_segments_per_label: int = 3
    tail_max_iterations: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in (
            "first_sample", "later_sample", "full_phase_iterations", "drop_support",
            "drop_age", "min_segments_per_label", "tail_max_iterations",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class Sample:
    segments: list[Segment]
    exhausted: bool


@dataclass
class MergeOutcome:
    status: str  # merged | n/a | failed | skipped
    clusters: list[dict] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)


@dataclass
class IncrementalRun:
    iterations: list[dict]
    final_codebook: list[CodebookEntry]
    dropped: list[tuple[str, list[str]]]
    stop_reason: str

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_codebook": [e.to_record() for e in self.final_codebook],
            "dropped": [{"code": c, "segment_ids": ids} for c, ids in self.dropped],
            "stop_reason": self.stop_reason,
        }

    def theme_records(self) -> list[dict]:
        """Final codebook in the same record shape as clustered themes."""
        return [
            {
                "theme_id": f"INC-T{i}",
                "phrase": e.code,
                "level": 1,
                "children": [],
                "segment_support": len(set(e.segment_ids)),
                "segment_ids": list(e.segment_ids),
            }
            for i, e in enumerate(self.final_codebook, start=1)
        ]


def sample_unseen(
    all_segments: Sequence[Segment],
    seen_ids: Iterable[str],
    dropped_ids: Iterable[str],
    n: int,
    seed: int,
) -> Sample:
    """Uniform sample without replacement from segments neither seen nor dropped.

    ``exhausted`` is set when the sample takes everything that was left
    (including the case where nothing was left).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    excluded = set(seen_ids) | set(dropped_ids)
    unseen = [s for s in all_segments if s.segment_id not in excluded]
    if len(unseen) <= n:
        return Sample(list(unseen), True)
    return Sample(random.Random(seed).sample(unseen, n), False)


def build_merge_prompt(
    codebook: Sequence[CodebookEntry], goal: str, texts: Mapping[str, str], model_id: str = ""
) -> ChatRequest:
    if not codebook:
        raise ValueError("codebook must be non-empty")
    entries = [(e.code, texts[e.example_segment_id]) for e in codebook]
    return ChatRequest(model_id, merge_system_prompt(goal), merge_user_prompt(entries))


_ANS = re.compile(r"Ans\s*:", re.IGNORECASE)
_NA = re.compile(r"^\W*N\s*/\s*A\b", re.IGNORECASE)


def parse_merge_answer(raw: str) -> list[dict] | None:
    """Return the list of clusters, or ``None`` for an ``Ans: N/A`` answer."""
    marks = list(_ANS.finditer(raw))
    tail = raw[marks[-1].end():] if marks else raw
    if _NA.match(tail.strip()):
        return None
    try:
        obj = loads_object(tail)
    except ValueError as exc:
        if marks:
            # the JSON may sit before a trailing "Ans:" echo
            try:
                obj = loads_object(raw[marks[0].end():])
            except ValueError:
                raise MergeParseError(str(exc)) from exc
        else:
            raise MergeParseError(str(exc)) from exc
    clusters = obj.get("clusters")
    if not isinstance(clusters, list):
        raise MergeParseError("answer has no 'clusters' list")
    out = []
    for c in clusters:
        if (
            not isinstance(c, dict)
            or not isinstance(c.get("high_level_code"), str)
            or not isinstance(c.get("original_codes"), list)
        ):
            raise MergeParseError(f"malformed cluster {c!r}")
        out.append(
            {
                "high_level_code": c["high_level_code"].strip(),
                "original_codes": [str(x) for x in c["original_codes"]],
                "justification": str(c.get("justification", "")),
            }
        )
    return out


def apply_merge(
    codebook: Sequence[CodebookEntry],
    clusters: Sequence[dict],
    order: Mapping[str, int],
) -> tuple[list[CodebookEntry], list[str]]:
    """Merge codebook entries per ``clusters``; one pass, no chaining.

    Codes not in the codebook are skipped with an anomaly. A merged entry
    takes the union of its members' segments and, as its example, the
    earliest-processed of them. If the high-level code already names an
    entry outside the cluster, that entry is folded in as well.
    """
    index = {normalize_phrase(e.code): i for i, e in enumerate(codebook)}
    consumed: set[int] = set()
    replacement: dict[int, CodebookEntry] = {}
    anomalies: list[str] = []
    for c in clusters:
        high = c["high_level_code"]
        if not normalize_phrase(high):
            anomalies.append("cluster with empty high_level_code skipped")
            continue
        members: list[int] = []
        for code in c["original_codes"]:
            i = index.get(normalize_phrase(code))
            if i is None:
                anomalies.append(f"code {code!r} not in codebook; skipped")
            elif i in consumed or i in members:
                anomalies.append(f"code {code!r} already merged this pass; skipped")
            else:
                members.append(i)
        same = index.get(normalize_phrase(high))
        if same is not None and same not in members and same not in consumed:
            members.append(same)
        if not members:
            continue
        if len(members) == 1 and normalize_phrase(codebook[members[0]].code) == normalize_phrase(high):
            continue
        members.sort()
        ids: list[str] = []
        seen: set[str] = set()
        for i in members:
            for sid in codebook[i].segment_ids:
                if sid not in seen:
                    seen.add(sid)
                    ids.append(sid)
        example = min(ids, key=lambda s: order.get(s, len(order))) if ids else codebook[members[0]].example_segment_id
        consumed.update(members)
        # a plain rename keeps its low-support age; a real merge starts over
        age = codebook[members[0]].low_support_age if len(members) == 1 else 0
        replacement[members[0]] = CodebookEntry(high, example, ids, age)

    out: list[CodebookEntry] = []
    for i, e in enumerate(codebook):
        if i in replacement:
            out.append(replacement[i])
        elif i not in consumed:
            out.append(e)
    return out, anomalies


def merge_codebook(
    codebook: Sequence[CodebookEntry],
    goal: str,
    gateway: Gateway,
    texts: Mapping[str, str],
    order: Mapping[str, int] | None = None,
) -> tuple[list[CodebookEntry], MergeOutcome]:
    """Ask the model to merge related codes and apply its answer.

    An unparseable answer is retried once; if it is still unusable the
    codebook is returned unchanged for this iteration.
    """
    if not codebook:
        raise ValueError("codebook must be non-empty")
    if order is None:
        order = {}
    base = build_merge_prompt(codebook, goal, texts)
    problems: list[str] = []
    for attempt in range(2):
        try:
            raw = gateway.complete(gateway.request(base.system_prompt, base.user_prompt, attempt)).text
        except Exception as exc:  # noqa: BLE001 - treated as a no-op merge
            problems.append(f"gateway failure: {exc}")
            break
        try:
            clusters = parse_merge_answer(raw)
        except MergeParseError as exc:
            problems.append(f"unparseable merge answer: {exc}")
            continue
        if clusters is None:
            return list(codebook), MergeOutcome("n/a")
        merged, anomalies = apply_merge(codebook, clusters, order)
        for a in anomalies:
            log.info("merge: %s", a)
        return merged, MergeOutcome("merged", clusters, anomalies)
    log.warning("merge skipped: %s", "; ".join(problems))
    return list(codebook), MergeOutcome("failed", [], problems)


def drop_low_support(
    codebook: Sequence[CodebookEntry], cfg: IncrementalConfig
) -> tuple[list[CodebookEntry], list[tuple[str, list[str]]]]:
    kept: list[CodebookEntry] = []
    dropped: list[tuple[str, list[str]]] = []
    for e in codebook:
        if len(e.segment_ids) <= cfg.drop_support:
            age = e.low_support_age + 1
            if age >= cfg.drop_age:
                dropped.append((e.code, list(e.segment_ids)))
                continue
            kept.append(CodebookEntry(e.code, e.example_segment_id, list(e.segment_ids), age))
        else:
            kept.append(CodebookEntry(e.code, e.example_segment_id, list(e.segment_ids), 0))
    return kept, dropped


def _gold_coverage_met(
    coverage: Mapping[str, Sequence[str]], seen: set[str], minimum: int
) -> bool:
    counts: dict[str, int] = {}
    for sid, labels in coverage.items():
        for lab in set(labels):
            counts.setdefault(lab, 0)
            if sid in seen:
                counts[lab] += 1
    return all(c >= minimum for c in counts.values())


def run_incremental(
    task: TaskSpec,
    segments: Sequence[Segment],
    cfg: IncrementalConfig,
    gateway: Gateway,
    gold_label_coverage: Mapping[str, Sequence[str]] | None = None,
    merge_gateway: Gateway | None = None,
) -> IncrementalRun:
    """Run the full phase, then the merge/drop tail phase.

    ``gold_label_coverage`` maps segment ids to their gold labels; when given,
    the full phase also waits until every gold label has at least
    ``cfg.min_segments_per_label`` processed segments.
    """
    if not segments:
        raise ValueError("segments must be non-empty")
    merge_gateway = merge_gateway or gateway
    goal = task.coding_goal
    texts = {s.segment_id: s.text for s in segments}
    seen: set[str] = set()
    dropped_ids: set[str] = set()
    order: dict[str, int] = {}
    codebook: list[CodebookEntry] = []
    all_dropped: list[tuple[str, list[str]]] = []
    records: list[dict] = []

    def merge_and_drop(record: dict) -> None:
        nonlocal codebook
        if codebook:
            codebook, outcome = merge_codebook(codebook, goal, merge_gateway, texts, order)
        else:
            outcome = MergeOutcome("skipped")
        record["merge"] = {
            "status": outcome.status,
            "clusters": outcome.clusters,
            "anomalies": outcome.anomalies,
        }
        codebook, dropped = drop_low_support(codebook, cfg)
        for _, ids in dropped:
            seen.difference_update(ids)
            dropped_ids.update(ids)
        all_dropped.extend(dropped)
        record["dropped"] = [{"code": c, "segment_ids": ids} for c, ids in dropped]
        record["codebook"] = [e.to_record() for e in codebook]
        records.append(record)

    iteration = 0
    full_reason = ""
    while True:
        done_iters = iteration >= cfg.full_phase_iterations
        covered = gold_label_coverage is None or _gold_coverage_met(
            gold_label_coverage, seen | dropped_ids, cfg.min_segments_per_label
        )
        if done_iters and covered:
            full_reason = "iterations_completed"
            if gold_label_coverage is not None:
                full_reason += "+gold_coverage_met"
            break
        n = cfg.first_sample if iteration == 0 else cfg.later_sample
        sample = sample_unseen(segments, seen, dropped_ids, n, cfg.seed + iteration)
        if not sample.segments:
            full_reason = "pool_exhausted"
            break
        iteration += 1
        log.info("incremental iteration %d: sampling %d (got %d)", iteration, n, len(sample.segments))

        annotations = generate_labels(task, sample.segments, gateway)
        new_codes: list[str] = []
        index = {normalize_phrase(e.code): e for e in codebook}
        for seg, ann in zip(sample.segments, annotations):
            seen.add(seg.segment_id)
            order[seg.segment_id] = len(order)
            if ann.irrelevant or ann.failed:
                continue
            # one code per segment: the first label the model gave
            lab = ann.labels[0]
            entry = index.get(lab.normalized)
            if entry is None:
                entry = CodebookEntry(lab.phrase, seg.segment_id, [])
                codebook.append(entry)
                index[lab.normalized] = entry
                new_codes.append(lab.phrase)
            entry.segment_ids.append(seg.segment_id)

        merge_and_drop(
            {
                "iteration": iteration,
                "phase": "full",
                "sample_size": n,
                "sampled": [s.segment_id for s in sample.segments],
                "exhausted": sample.exhausted,
                "new_codes": new_codes,
            }
        )

    tail_reason = ""
    tail = 0
    while True:
        if all(len(e.segment_ids) > cfg.drop_support for e in codebook):
            tail_reason = "all_supported"
            break
        if tail >= cfg.tail_max_iterations:
            tail_reason = "tail_cap_reached"
            break
        tail += 1
        iteration += 1
        merge_and_drop({"iteration": iteration, "phase": "tail", "sample_size": 0, "sampled": []})

    stop = f"full_phase:{full_reason};tail_phase:{tail_reason}"
    log.info("incremental run stopped (%s) with %d codes", stop, len(codebook))
    return IncrementalRun(records, codebook, all_dropped, stop)
