"""Iterative LLM clustering of labels into themes, with lineage.

Iteration 1 clusters the distinct pool labels; every later iteration
clusters the distinct theme phrases of the iteration before it. Each theme
remembers its children, so any final theme can be expanded back down to the
pool labels and the segments that produced them.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from ._text import loads_object, normalize_phrase
from .errors import ClusterParseError, LookupFailure
from .gateway import ChatRequest, Gateway
from .prompts import cluster_system_prompt, cluster_user_prompt

log = logging.getLogger(__name__)

STOP_THRESHOLD = "threshold"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_FIXED_POINT = "fixed_point"


@dataclass
class Theme:
    theme_id: str
    phrase: str
    level: int
    children: list[str]
    segment_support: int = 0

    def to_record(self) -> dict:
        return {
            "theme_id": self.theme_id,
            "phrase": self.phrase,
            "level": self.level,
            "children": list(self.children),
            "segment_support": self.segment_support,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Theme":
        return cls(
            rec["theme_id"], rec["phrase"], int(rec["level"]), list(rec["children"]),
            int(rec.get("segment_support", 0)),
        )


@dataclass(frozen=True)
class ClusterConfig:
    batch_size: int = 100
    max_iterations: int = 5
    theme_threshold: int = 20
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_iterations < 1 or self.theme_threshold < 1:
            raise ValueError("batch_size, max_iterations and theme_threshold must be >= 1")


@dataclass
class ClusterParse:
    clusters: dict[str, list[str]]
    anomalies: list[str] = field(default_factory=list)


@dataclass
class HierarchyRun:
    pool: list[tuple[str, list[str]]]
    iterations: list[list[Theme]]
    stop_reason: str
    anomalies: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {t.theme_id: t for level in self.iterations for t in level}
        self._pool_map = {label: ids for label, ids in self.pool}

    @property
    def final_themes(self) -> list[Theme]:
        return self.iterations[-1] if self.iterations else []

    def theme(self, theme_id: str) -> Theme:
        try:
            return self._by_id[theme_id]
        except KeyError:
            raise LookupFailure(f"unknown theme id {theme_id!r}") from None

    def segments_of_label(self, label: str) -> list[str]:
        return self._pool_map[label]

    def leaf_labels(self, theme_id: str) -> list[str]:
        theme = self.theme(theme_id)
        if theme.level == 1:
            return list(theme.children)
        return [lab for child in theme.children for lab in self.leaf_labels(child)]

    def to_dict(self) -> dict:
        return {
            "pool": [{"label": lab, "segment_ids": ids} for lab, ids in self.pool],
            "iterations": [
                {"iteration": i, "theme_count": len(level), "themes": [t.to_record() for t in level]}
                for i, level in enumerate(self.iterations, start=1)
            ],
            "stop_reason": self.stop_reason,
            "anomalies": list(self.anomalies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyRun":
        return cls(
            pool=[(p["label"], list(p["segment_ids"])) for p in d["pool"]],
            iterations=[[Theme.from_record(t) for t in it["themes"]] for it in d["iterations"]],
            stop_reason=d["stop_reason"],
            anomalies=list(d.get("anomalies", [])),
        )


def partition_batches(items: Sequence[str], batch_size: int, seed: int) -> list[list[str]]:
    if not items:
        raise ValueError("items must be non-empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    shuffled = list(items)
    random.Random(seed).shuffle(shuffled)
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def build_cluster_prompt(goal: str, batch: Sequence[str], model_id: str = "") -> ChatRequest:
    if not batch:
        raise ValueError("batch must be non-empty")
    return ChatRequest(model_id, cluster_system_prompt(goal), cluster_user_prompt(batch))


def _merge_pairs(pairs):
    # duplicate keys in the model's JSON: keep all members, in order
    merged: dict = {}
    for k, v in pairs:
        if k in merged and isinstance(merged[k], list) and isinstance(v, list):
            merged[k] = merged[k] + v
        else:
            merged[k] = v
    return merged


def parse_cluster_response(raw: str, batch: Sequence[str]) -> ClusterParse:
    """Turn a clustering answer into a partition of ``batch``.

    Members are matched to batch items by normalized equality. Members that
    are not batch items are dropped, an item claimed by two clusters stays
    with the first, and items no cluster mentions become singleton themes
    named after themselves. Every such repair is reported in ``anomalies``.
    Raises :class:`ClusterParseError` if there is no usable JSON object.
    """
    try:
        obj = loads_object(raw, object_pairs_hook=_merge_pairs)
    except ValueError as exc:
        raise ClusterParseError(str(exc)) from exc
    if not obj:
        raise ClusterParseError("empty cluster map")

    lookup: dict[str, str] = {}
    for item in batch:
        lookup.setdefault(normalize_phrase(item), item)

    anomalies: list[str] = []
    clusters: dict[str, list[str]] = {}
    names: dict[str, str] = {}  # normalized theme phrase -> key in clusters
    assigned: set[str] = set()
    for name, members in obj.items():
        if isinstance(members, str):
            members = [members]
        if not isinstance(members, list):
            anomalies.append(f"cluster {name!r}: value is not a list, ignored")
            continue
        norm_name = normalize_phrase(str(name))
        if not norm_name:
            anomalies.append("cluster with an empty name ignored")
            continue
        kept: list[str] = []
        for member in members:
            norm = normalize_phrase(str(member))
            item = lookup.get(norm)
            if item is None:
                anomalies.append(f"foreign member {member!r} in cluster {name!r} dropped")
            elif norm in assigned:
                anomalies.append(f"member {member!r} repeated in cluster {name!r}; first kept")
            else:
                assigned.add(norm)
                kept.append(item)
        if not kept:
            continue
        key = names.setdefault(norm_name, str(name).strip())
        clusters.setdefault(key, []).extend(kept)

    for norm, item in lookup.items():
        if norm in assigned:
            continue
        anomalies.append(f"item {item!r} missing from every cluster; kept as singleton")
        key = names.setdefault(norm, item)
        clusters.setdefault(key, []).append(item)
        assigned.add(norm)

    for note in anomalies:
        log.info("cluster parse: %s", note)
    return ClusterParse(clusters, anomalies)


def _singletons(batch: Sequence[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    seen: set[str] = set()
    for item in batch:
        norm = normalize_phrase(item)
        if norm not in seen:
            seen.add(norm)
            out[item] = [item]
    return out


def cluster_batch(goal: str, batch: Sequence[str], gateway: Gateway) -> ClusterParse:
    """One clustering call, with a single retry; falls back to singletons."""
    base = build_cluster_prompt(goal, batch)
    errors: list[str] = []
    for attempt in range(2):
        try:
            raw = gateway.complete(gateway.request(base.system_prompt, base.user_prompt, attempt)).text
        except Exception as exc:  # noqa: BLE001 - a failed batch passes through
            errors.append(f"gateway failure: {exc}")
            break
        try:
            return parse_cluster_response(raw, batch)
        except ClusterParseError as exc:
            errors.append(f"unparseable response: {exc}")
    notes = errors + [f"batch of {len(batch)} passed through as singletons"]
    log.warning("cluster batch: %s", "; ".join(notes))
    return ClusterParse(_singletons(batch), notes)


def _support(themes: list[Theme], child_sets: dict[str, set[str]]) -> dict[str, set[str]]:
    sets: dict[str, set[str]] = {}
    for t in themes:
        acc: set[str] = set()
        for c in t.children:
            acc |= child_sets[c]
        sets[t.theme_id] = acc
        t.segment_support = len(acc)
    return sets


def run_hierarchical_clustering(
    pool: Sequence[tuple[str, Sequence[str]]],
    goal: str,
    cfg: ClusterConfig,
    gateway: Gateway,
    workers: int | None = None,
) -> HierarchyRun:
    """Cluster ``pool`` until a stop condition fires.

    Conditions are checked after every iteration in this order: no reduction
    in item count (``fixed_point``), theme count at or below
    ``cfg.theme_threshold`` (``threshold``), iteration budget spent
    (``max_iterations``).
    """
    if not pool:
        raise ValueError("pool must be non-empty")
    pool = [(label, list(ids)) for label, ids in pool]
    child_sets: dict[str, set[str]] = {label: set(ids) for label, ids in pool}
    # normalized phrase -> child reference for the current iteration's inputs
    refs: dict[str, str] = {}
    items: list[str] = []
    for label, _ in pool:
        norm = normalize_phrase(label)
        if norm in refs:
            raise ValueError(f"pool labels {refs[norm]!r} and {label!r} normalize identically")
        refs[norm] = label
        items.append(label)

    iterations: list[list[Theme]] = []
    anomalies: list[str] = []
    stop_reason = STOP_MAX_ITERATIONS
    n_workers = workers or gateway.cfg.max_concurrency
    for level in range(1, cfg.max_iterations + 1):
        batches = partition_batches(items, cfg.batch_size, cfg.shuffle_seed + level)
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            parsed = list(ex.map(lambda b: cluster_batch(goal, b, gateway), batches))

        themes: list[Theme] = []
        by_name: dict[str, Theme] = {}
        for b, result in enumerate(parsed):
            anomalies.extend(f"iteration {level} batch {b}: {a}" for a in result.anomalies)
            for name, members in result.clusters.items():
                norm = normalize_phrase(name)
                theme = by_name.get(norm)
                if theme is None:
                    theme = Theme(f"L{level}-T{len(themes) + 1}", name, level, [])
                    by_name[norm] = theme
                    themes.append(theme)
                theme.children.extend(refs[normalize_phrase(m)] for m in members)

        child_sets.update(_support(themes, child_sets))
        iterations.append(themes)
        log.info("iteration %d: %d items -> %d themes", level, len(items), len(themes))

        if len(themes) >= len(items):
            stop_reason = STOP_FIXED_POINT
            break
        if len(themes) <= cfg.theme_threshold:
            stop_reason = STOP_THRESHOLD
            break
        refs = {normalize_phrase(t.phrase): t.theme_id for t in themes}
        items = [t.phrase for t in themes]

    return HierarchyRun(pool, iterations, stop_reason, anomalies)


def trace_theme(run: HierarchyRun, theme_id: str, depth: int | None = None) -> dict:
    """Expand a theme into its lineage tree.

    ``depth`` counts levels below the root (``None`` = all the way down to
    pool labels). Label leaves carry their segment ids.
    """
    theme = run.theme(theme_id)
    node = {
        "theme_id": theme.theme_id,
        "phrase": theme.phrase,
        "level": theme.level,
        "segment_support": theme.segment_support,
    }
    if depth is not None and depth <= 0:
        return node
    below = None if depth is None else depth - 1
    if theme.level == 1:
        node["children"] = [
            {"label": lab, "segment_ids": list(run.segments_of_label(lab))} for lab in theme.children
        ]
    else:
        node["children"] = [trace_theme(run, c, below) for c in theme.children]
    return node


def flatten_trace(tree: dict) -> list[dict]:
    """Label leaves of a trace tree, left to right."""
    if "label" in tree:
        return [tree]
    return [leaf for child in tree.get("children", []) for leaf in flatten_trace(child)]


def render_trace(tree: dict, indent: int = 0) -> str:
    pad = "  " * indent
    if "label" in tree:
        return f"{pad}- {tree['label']}  [{len(tree['segment_ids'])} segment(s)]"
    head = f"{pad}{tree['theme_id']}  {tree['phrase']}  (level {tree['level']}, support {tree['segment_support']})"
    lines = [head] + [render_trace(c, indent + 1) for c in tree.get("children", [])]
    return "\n".join(lines)


def theme_distribution(run: HierarchyRun) -> list[tuple[Theme, int, int]]:
    """Final themes with label count and segment support, largest first.

    Ties on label count are broken by phrase.
    """
    rows = [(t, len(run.leaf_labels(t.theme_id)), t.segment_support) for t in run.final_themes]
    rows.sort(key=lambda r: (-r[1], r[0].phrase))
    return rows
