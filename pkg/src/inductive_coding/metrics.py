"""Theme matching and theme-/segment-level precision and recall.

Gold themes and predicted themes are matched through embedding cosine
similarity: every pair whose similarity is strictly above ``k`` counts, and
the matching is many-to-many. Scores are computed with
:class:`fractions.Fraction` so they are exact; convert with ``float()`` for
reporting.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GoldSchemaError
from .gateway import Gateway
from .storage import atomic_write_text

DEFAULT_K_GRID = (0.4, 0.45, 0.5)

NO_MATCHED_THEMES = "no matched themes"
NO_MATCHED_SEGMENTS = "matched themes cover no segments"


@dataclass(frozen=True)
class ThemeSet:
    kind: str  # gold | predicted
    items: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if self.kind not in ("gold", "predicted"):
            raise ValueError(f"unknown theme set kind {self.kind!r}")
        ids = [i for i, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("theme ids must be unique")
        if any(not p.strip() for _, p in self.items):
            raise ValueError("theme phrases must be non-empty")

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    @property
    def phrases(self) -> list[str]:
        return [p for _, p in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class MatchResult:
    k: float
    pairs: tuple[tuple[Hashable, Hashable, float], ...]
    gold_ids: tuple[Hashable, ...]
    pred_ids: tuple[Hashable, ...]

    @property
    def gold_matched(self) -> frozenset:
        return frozenset(g for g, _, _ in self.pairs)

    @property
    def pred_matched(self) -> frozenset:
        return frozenset(t for _, t, _ in self.pairs)

    def gold_for(self, t) -> set:
        return {g for g, tt, _ in self.pairs if tt == t}

    def preds_for(self, g) -> set:
        return {t for gg, t, _ in self.pairs if gg == g}


@dataclass(frozen=True)
class ThemeLevelScores:
    precision: Fraction
    recall: Fraction
    k: float


@dataclass(frozen=True)
class SegmentLevelScores:
    value: Fraction | None
    per_theme: tuple[tuple[Hashable, Fraction, Fraction | None], ...] = ()
    reason: str | None = None

    @property
    def defined(self) -> bool:
        return self.value is not None


def similarity_matrix(gold: ThemeSet, pred: ThemeSet, embedder: Gateway) -> np.ndarray:
    """Cosine similarity of every gold phrase (rows) with every predicted phrase (columns)."""
    if not len(gold) or not len(pred):
        raise ValueError("both theme sets must be non-empty")
    vecs = embedder.embed_batch(gold.phrases + pred.phrases)
    g = np.stack([v.values for v in vecs[: len(gold)]])
    t = np.stack([v.values for v in vecs[len(gold) :]])
    return np.clip(g @ t.T, -1.0, 1.0)


def match_themes(
    matrix,
    k: float,
    gold_ids: Sequence[Hashable] | None = None,
    pred_ids: Sequence[Hashable] | None = None,
) -> MatchResult:
    """All (gold, predicted) pairs with similarity strictly above ``k``.

    Ids default to row and column indices.
    """
    if not 0 < k < 1:
        raise ValueError("k must lie in (0, 1)")
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("matrix must be 2-d")
    gold_ids = tuple(range(m.shape[0])) if gold_ids is None else tuple(gold_ids)
    pred_ids = tuple(range(m.shape[1])) if pred_ids is None else tuple(pred_ids)
    if (len(gold_ids), len(pred_ids)) != m.shape:
        raise ValueError("id lists do not match matrix shape")
    rows, cols = np.nonzero(m > k)
    pairs = tuple((gold_ids[i], pred_ids[j], float(m[i, j])) for i, j in zip(rows, cols))
    return MatchResult(k, pairs, gold_ids, pred_ids)


def theme_level_scores(match: MatchResult, n_gold: int, n_pred: int) -> ThemeLevelScores:
    if n_gold < 1 or n_pred < 1:
        raise ValueError("|G| and |T| must be >= 1")
    return ThemeLevelScores(
        Fraction(len(match.pred_matched), n_pred),
        Fraction(len(match.gold_matched), n_gold),
        match.k,
    )


def _weighted(groups: list[tuple[Hashable, int, int]], empty_reason: str) -> SegmentLevelScores:
    # groups: (theme, |S|, |S^matched|) over matched themes, in stable order
    total = sum(size for _, size, _ in groups)
    if total == 0:
        return SegmentLevelScores(None, tuple((th, Fraction(0), None) for th, _, _ in groups), empty_reason)
    per_theme = []
    value = Fraction(0)
    for th, size, hit in groups:
        if size == 0:
            per_theme.append((th, Fraction(0), None))
            continue
        w = Fraction(size, total)
        score = Fraction(hit, size)
        per_theme.append((th, w, score))
        value += w * score
    return SegmentLevelScores(value, tuple(per_theme))


def segment_level_precision(
    match: MatchResult,
    assignments: Mapping[Hashable, Hashable | None],
    gold_labels: Mapping[Hashable, Iterable[Hashable]],
) -> SegmentLevelScores:
    """Weighted precision over matched predicted themes.

    ``assignments`` maps segment -> predicted theme (or ``None``);
    ``gold_labels`` maps segment -> its gold themes (possibly several).
    A segment assigned to ``t`` counts as correct when it carries any gold
    theme matched to ``t``.
    """
    matched = [t for t in match.pred_ids if t in match.pred_matched]
    if not matched:
        return SegmentLevelScores(None, (), NO_MATCHED_THEMES)
    gold_sets = {s: set(v) for s, v in gold_labels.items()}
    groups = []
    for t in matched:
        equivalents = match.gold_for(t)
        s_t = [s for s, a in assignments.items() if a == t]
        hit = sum(1 for s in s_t if gold_sets.get(s, set()) & equivalents)
        groups.append((t, len(s_t), hit))
    return _weighted(groups, NO_MATCHED_SEGMENTS)


def segment_level_recall(
    match: MatchResult,
    assignments: Mapping[Hashable, Hashable | None],
    gold_labels: Mapping[Hashable, Iterable[Hashable]],
) -> SegmentLevelScores:
    """Weighted recall over matched gold themes; mirror of the precision."""
    matched = [g for g in match.gold_ids if g in match.gold_matched]
    if not matched:
        return SegmentLevelScores(None, (), NO_MATCHED_THEMES)
    gold_sets = {s: set(v) for s, v in gold_labels.items()}
    groups = []
    for g in matched:
        equivalents = match.preds_for(g)
        s_g = [s for s, labels in gold_sets.items() if g in labels]
        hit = sum(1 for s in s_g if assignments.get(s) in equivalents)
        groups.append((g, len(s_g), hit))
    return _weighted(groups, NO_MATCHED_SEGMENTS)


@dataclass
class Evaluation:
    k: float
    theme_level: ThemeLevelScores
    segment_precision: SegmentLevelScores
    segment_recall: SegmentLevelScores
    match: MatchResult = field(repr=False)

    def to_dict(self) -> dict:
        def seg(s: SegmentLevelScores) -> dict:
            return {
                "value": None if s.value is None else float(s.value),
                "exact": None if s.value is None else str(s.value),
                "undefined_reason": s.reason,
                "per_theme": [
                    {
                        "theme_id": th,
                        "weight": float(w),
                        "score": None if sc is None else float(sc),
                    }
                    for th, w, sc in s.per_theme
                ],
            }

        return {
            "k": self.k,
            "theme_level": {
                "precision": float(self.theme_level.precision),
                "recall": float(self.theme_level.recall),
                "precision_exact": str(self.theme_level.precision),
                "recall_exact": str(self.theme_level.recall),
            },
            "segment_level": {
                "precision": seg(self.segment_precision),
                "recall": seg(self.segment_recall),
            },
            "matched_pairs": [
                {"gold_id": g, "pred_id": t, "similarity": round(sim, 6)}
                for g, t, sim in self.match.pairs
            ],
        }


def evaluate(
    matrix,
    gold: ThemeSet,
    pred: ThemeSet,
    assignments: Mapping[str, str | None],
    gold_labels: Mapping[str, Iterable[str]],
    k_grid: Sequence[float] = DEFAULT_K_GRID,
) -> list[Evaluation]:
    out = []
    for k in k_grid:
        m = match_themes(matrix, k, gold.ids, pred.ids)
        out.append(
            Evaluation(
                k,
                theme_level_scores(m, len(gold), len(pred)),
                segment_level_precision(m, assignments, gold_labels),
                segment_level_recall(m, assignments, gold_labels),
                m,
            )
        )
    return out


def _cell(v: float) -> str:
    text = f"{v:.2f}"
    return "0.00" if text == "-0.00" else text


def heatmap_csv(matrix, gold: ThemeSet, pred: ThemeSet) -> str:
    m = np.asarray(matrix, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gold \\ predicted", *pred.phrases])
    for phrase, row in zip(gold.phrases, m):
        w.writerow([phrase, *(_cell(v) for v in row)])
    return buf.getvalue()


def export_heatmap(matrix, gold: ThemeSet, pred: ThemeSet, path: str | Path) -> None:
    atomic_write_text(path, heatmap_csv(matrix, gold, pred))


def load_gold(path: str | Path) -> tuple[ThemeSet, dict[str, list[str]]]:
    """Read a gold JSONL file.

    Two record types are accepted::

        {"record": "theme", "id": "G1", "phrase": "..."}
        {"record": "segment_labels", "segment_id": "...", "themes": ["G1", ...]}

    Every schema problem is collected (with its line number) and raised
    together as :class:`GoldSchemaError`.
    """
    errors: list[str] = []
    themes: list[tuple[str, str]] = []
    theme_ids: set[str] = set()
    labels: dict[str, list[str]] = {}
    label_lines: list[tuple[int, str, list[str]]] = []
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise GoldSchemaError([f"{path}: cannot read ({exc})"]) from exc
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{n}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"{where}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            errors.append(f"{where}: expected an object")
            continue
        kind = rec.get("record")
        if kind == "theme":
            tid, phrase = rec.get("id"), rec.get("phrase")
            if not isinstance(tid, str) or not tid:
                errors.append(f"{where}: theme needs a non-empty string 'id'")
            elif not isinstance(phrase, str) or not phrase.strip():
                errors.append(f"{where}: theme {tid!r} needs a non-empty string 'phrase'")
            elif tid in theme_ids:
                errors.append(f"{where}: duplicate theme id {tid!r}")
            else:
                theme_ids.add(tid)
                themes.append((tid, phrase))
        elif kind == "segment_labels":
            sid, tl = rec.get("segment_id"), rec.get("themes")
            if not isinstance(sid, str) or not sid:
                errors.append(f"{where}: segment_labels needs a non-empty string 'segment_id'")
            elif not isinstance(tl, list) or not all(isinstance(t, str) for t in tl):
                errors.append(f"{where}: 'themes' must be a list of theme ids")
            elif sid in labels:
                errors.append(f"{where}: duplicate segment_labels for {sid!r}")
            else:
                labels[sid] = list(dict.fromkeys(tl))
                label_lines.append((n, sid, tl))
        else:
            errors.append(f"{where}: unknown record type {kind!r}")
    for n, sid, tl in label_lines:
        for t in tl:
            if t not in theme_ids:
                errors.append(f"{path.name}:{n}: segment {sid!r} references unknown theme {t!r}")
    if not themes and not errors:
        errors.append(f"{path.name}: no theme records")
    if errors:
        raise GoldSchemaError(errors)
    return ThemeSet("gold", tuple(themes)), labels
