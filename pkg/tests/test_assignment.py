from __future__ import annotations

import pytest

import _support
from inductive_coding.assignment import (
    ThemeAssignment,
    ThemeResolver,
    assign_all,
    build_assignment_prompt,
    extract_answer,
    parse_assignment,
    unresolved_rate,
)
from inductive_coding.errors import TransientError
from inductive_coding.gateway import Gateway, GatewayConfig
from inductive_coding.scripted import ScriptedChat, ScriptedEmbedder

THEMES = [("T1", "Sales pressure"), ("T2", "Pay and benefits"), ("T3", "Management")]


def _gw(chat=None, embed=None, tmp_path=None, **cfg) -> Gateway:
    cache = str(tmp_path / "cache") if tmp_path is not None else None
    return Gateway(GatewayConfig("x", cache_dir=cache, **cfg), chat_provider=chat, embed_provider=embed,
                   sleep=lambda s: None)


def test_prompt_enumerates_codebook():
    seg = _support.segments(["the text"])[0]
    req = build_assignment_prompt("GOAL", [p for _, p in THEMES], seg)
    assert req.system_prompt == "GOAL"
    assert "1. Sales pressure, 2. Pay and benefits, 3. Management" in req.user_prompt
    assert "Segment: the text" in req.user_prompt
    with pytest.raises(ValueError):
        build_assignment_prompt("g", [], seg)


def test_extract_answer():
    assert extract_answer("reasoning\nAns: Management\nmore") == "Management"
    assert extract_answer("Ans: first\nAns:\n\n  second ") == "second"
    assert extract_answer("Management") == "Management"
    assert extract_answer("Ans:") == ""


def test_exact_match():
    a = parse_assignment("s", "Ans: Management", THEMES)
    assert (a.theme_id, a.resolution) == ("T3", "exact")


def test_normalized_exact_match():
    a = parse_assignment("s", "Ans: sales PRESSURE.", THEMES)
    assert (a.theme_id, a.theme_phrase, a.resolution) == ("T1", "Sales pressure", "exact")


def test_enumerated_answer():
    a = parse_assignment("s", "Ans: 2. Pay and benefits", THEMES)
    assert (a.theme_id, a.resolution) == ("T2", "exact")


def test_fuzzy_match_above_threshold():
    emb = ScriptedEmbedder({"Sales pressure": [1, 0, 0], "Pay and benefits": [0, 1, 0],
                            "Management": [0, 0, 1], "pushy selling": [0.95, 0.1, 0]})
    a = parse_assignment("s", "Ans: pushy selling", THEMES, embedder=_gw(embed=emb))
    assert (a.theme_id, a.resolution) == ("T1", "fuzzy")


def test_orthogonal_answer_is_unresolved():
    emb = ScriptedEmbedder({"Sales pressure": [1, 0, 0, 0], "Pay and benefits": [0, 1, 0, 0],
                            "Management": [0, 0, 1, 0], "weather": [0, 0, 0, 1]})
    a = parse_assignment("s", "Ans: weather", THEMES, embedder=_gw(embed=emb))
    assert a.theme_id is None and a.resolution == "unresolved" and a.raw_answer == "Ans: weather"


def test_threshold_is_strict():
    emb = ScriptedEmbedder({"a": [1, 0], "b": [0, 1], "q": [1, 1]})
    resolver = ThemeResolver([("A", "a"), ("B", "b")], _gw(embed=emb), threshold=0.5 ** 0.5)
    assert resolver.resolve("q") == (None, "unresolved")


def test_no_embedder_means_unresolved():
    assert parse_assignment("s", "Ans: something else", THEMES).resolution == "unresolved"


def test_assignment_invariant():
    with pytest.raises(ValueError):
        ThemeAssignment("s", None, None, "", "exact")
    a = ThemeAssignment("s", "T1", "x", "raw", "fuzzy", 3, 4)
    assert ThemeAssignment.from_record(a.to_record()) == a


def test_assign_all_with_failures_keeps_order():
    texts = ["about quotas", "about pay", "about bosses", "about quotas again", "about pay again"]
    answers = {"quotas": "Sales pressure", "pay": "Pay and benefits", "bosses": "Management"}

    def respond(req):
        seg = req.user_prompt.split("Segment: ")[1]
        return "Ans: " + answers[seg.split()[1]]

    chat = ScriptedChat(respond, failures=[None, TransientError("x"), None, TransientError("y"), None])
    out = assign_all("g", THEMES, _support.segments(texts), _gw(chat, max_retries=0), workers=1)
    assert [a.segment_id for a in out] == [f"d:{i}" for i in range(5)]
    assert [a.theme_id for a in out] == ["T1", None, "T3", None, "T2"]
    assert unresolved_rate(out) == pytest.approx(0.4)


def test_rerun_hits_cache_and_matches(tmp_path):
    segs = _support.segments(["one", "two", "three"])
    chat = ScriptedChat("Ans: Management")
    first = assign_all("g", THEMES, segs, _gw(chat, tmp_path=tmp_path))
    again_chat = ScriptedChat("Ans: Sales pressure")
    second = assign_all("g", THEMES, segs, _gw(again_chat, tmp_path=tmp_path))
    assert second == first and again_chat.calls == []


def test_assign_requires_inputs():
    with pytest.raises(ValueError):
        assign_all("g", [], _support.segments(["x"]), _gw(ScriptedChat("x")))


def test_unresolved_rate_empty():
    assert unresolved_rate([]) == 0.0
