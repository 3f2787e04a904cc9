"""Deterministic offline providers.

``ScriptedChat`` and ``ScriptedEmbedder`` replay whatever a test tells them
to and keep a call log. ``HeuristicChatModel`` and ``HashEmbedder`` answer
every prompt the pipeline sends with cheap, reproducible rules, which makes
the whole CLI runnable without a model server (``scripted://heuristic``).
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from collections import Counter
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import TransientError
from .gateway import ChatRequest, ProviderReply

_WORD = re.compile(r"[a-z][a-z'-]*")

STOPWORDS = frozenset(
    """a about above after again against all also am an and any are as at be because been
    before being below between both but by can could did do does doing down during each few
    for from further had has have having he her here hers herself him himself his how i if in
    into is it its itself just me more most my myself no nor not now of off on once only or
    other our ours ourselves out over own same she should so some such than that the their
    theirs them themselves then there these they this those through to too under until up very
    was we were what when where which while who whom why will with would you your yours
    yourself yourselves""".split()
)


def _tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def _count_tokens(*texts: str) -> int:
    return sum(len(t.split()) for t in texts)


class ScriptedChat:
    """Chat provider driven by a function, a mapping or a constant.

    ``failures`` lists, per call number, an exception to raise instead of
    answering (``True`` means a :class:`TransientError`). ``delay`` sleeps
    inside the call so concurrency can be observed.
    """

    def __init__(
        self,
        respond: Callable[[ChatRequest], str] | Mapping[str, str] | str,
        failures: Sequence[bool | BaseException | None] = (),
        delay: float = 0.0,
    ):
        if isinstance(respond, str):
            text = respond
            respond = lambda req: text  # noqa: E731
        elif isinstance(respond, Mapping):
            table = dict(respond)
            respond = lambda req: table[req.user_prompt]  # noqa: E731
        self.respond = respond
        self.failures = list(failures)
        self.delay = delay
        self.calls: list[ChatRequest] = []
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()

    def chat(self, req: ChatRequest) -> ProviderReply:
        with self._lock:
            n = len(self.calls)
            self.calls.append(req)
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            fail = self.failures[n] if n < len(self.failures) else None
            if fail is True:
                raise TransientError(f"scripted failure on call {n + 1}")
            if isinstance(fail, BaseException):
                raise fail
            text = self.respond(req)
            return ProviderReply(
                text, "stop", _count_tokens(req.system_prompt, req.user_prompt), _count_tokens(text)
            )
        finally:
            with self._lock:
                self.in_flight -= 1


class ScriptedEmbedder:
    """Embedding provider from a text->vector mapping or function."""

    def __init__(
        self,
        vectors: Mapping[str, Sequence[float]] | Callable[[str], Sequence[float]],
        batch_limit: int = 100,
    ):
        self.vectors = vectors
        self.batch_limit = batch_limit
        self.calls: list[list[str]] = []
        self._lock = threading.Lock()

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]:
        with self._lock:
            self.calls.append(list(texts))
        get = self.vectors if callable(self.vectors) else self.vectors.__getitem__
        return [list(get(t)) for t in texts]


class HashEmbedder:
    """Bag-of-words vectors via feature hashing; similar wording, similar vector."""

    def __init__(self, dims: int = 256, batch_limit: int = 100):
        self.dims = dims
        self.batch_limit = batch_limit

    def vector(self, text: str) -> list[float]:
        v = np.zeros(self.dims)
        words = [w for w in _tokens(text) if w not in STOPWORDS] or _tokens(text)
        for w in words:
            h = hashlib.md5(w.encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "little") % self.dims
            v[idx] += 1.0 if h[4] & 1 else -1.0
        if not v.any():
            v[0] = 1.0
        return v.tolist()

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]:
        return [self.vector(t) for t in texts]


class HeuristicChatModel:
    """Rule-based stand-in for a chat model that speaks every pipeline prompt.

    * generation: the two most frequent content words form a label; a
      second label is added for long segments; too little content means
      ``Irrelevant``.
    * clustering: items are sorted and grouped ``fan_in`` at a time, each
      group named after its first member.
    * merging: codes sharing a first word merge into ``"<word> matters"``.
    * assignment: the codebook entry with the largest word overlap.
    """

    def __init__(self, fan_in: int = 2, min_content_words: int = 2):
        self.fan_in = fan_in
        self.min_content_words = min_content_words

    def chat(self, req: ChatRequest) -> ProviderReply:
        system, user = req.system_prompt, req.user_prompt
        if "LABEL: [Irrelevant]" in system:
            text = self.label(user)
        elif "high_level_code" in system:
            text = self.merge(user)
        elif "Output in json format" in system:
            text = self.cluster(user)
        elif "Codebook:" in user and "Ans:" in user:
            text = self.assign(user)
        else:
            text = "I cannot help with that."
        return ProviderReply(text, "stop", _count_tokens(system, user), _count_tokens(text))

    def label(self, segment: str) -> str:
        words = [w for w in _tokens(segment) if len(w) >= 4 and w not in STOPWORDS]
        if len(set(words)) < self.min_content_words:
            return "LABEL: [Irrelevant]"
        counts = Counter(words)
        first_pos = {}
        for i, w in enumerate(words):
            first_pos.setdefault(w, i)
        ranked = sorted(counts, key=lambda w: (-counts[w], first_pos[w]))
        labels = [f"{ranked[0]} {ranked[1]}"]
        if len(ranked) >= 8:
            labels.append(f"{ranked[2]} {ranked[3]}")
        return "\n".join(f"LABEL: [{lab}]" for lab in labels)

    def cluster(self, user: str) -> str:
        items = sorted({line.strip() for line in user.splitlines() if line.strip()})
        groups = [items[i : i + self.fan_in] for i in range(0, len(items), self.fan_in)]
        return json.dumps({g[0]: g for g in groups}, indent=1)

    def merge(self, user: str) -> str:
        codes = [m.group(1).strip() for m in re.finditer(r"^\d+\. (.+)$", user, re.MULTILINE)]
        by_head: dict[str, list[str]] = {}
        for code in codes:
            toks = code.lower().split()
            if toks:
                by_head.setdefault(toks[0], []).append(code)
        clusters = [
            {
                "high_level_code": f"{head} matters",
                "original_codes": members,
                "justification": f"all codes start with '{head}'",
            }
            for head, members in by_head.items()
            if len(members) > 1
        ]
        if not clusters:
            return "Ans: N/A"
        return "Ans:\n" + json.dumps({"clusters": clusters}, indent=1)

    def assign(self, user: str) -> str:
        cb_line = user[user.rindex("Codebook:") + len("Codebook:") :].split("\n", 1)[0]
        themes = [t.strip() for t in re.split(r"(?:^|,)\s*\d+\.\s", cb_line) if t.strip()]
        seg_text = user[user.rindex("Segment:") + len("Segment:") :]
        seg_words = set(_tokens(seg_text)) - STOPWORDS
        best, best_overlap = None, 0
        for theme in themes:
            overlap = len((set(_tokens(theme)) - STOPWORDS) & seg_words)
            if overlap > best_overlap:
                best, best_overlap = theme, overlap
        if best is None:
            return "Ans: none of these"
        return f"Ans: {best}"
