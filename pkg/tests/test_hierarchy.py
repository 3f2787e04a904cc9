from __future__ import annotations

import json

import pytest

from inductive_coding.errors import ClusterParseError, LookupFailure
from inductive_coding.gateway import Gateway, GatewayConfig
from inductive_coding.hierarchy import (
    STOP_FIXED_POINT,
    STOP_MAX_ITERATIONS,
    ClusterConfig,
    HierarchyRun,
    build_cluster_prompt,
    cluster_batch,
    flatten_trace,
    parse_cluster_response,
    partition_batches,
    run_hierarchical_clustering,
    theme_distribution,
    trace_theme,
)
from inductive_coding.scripted import HeuristicChatModel, ScriptedChat


def _gw(chat) -> Gateway:
    return Gateway(GatewayConfig("x", max_concurrency=2), chat_provider=chat, sleep=lambda s: None)


def test_partition_sizes_and_determinism():
    items = [f"i{n}" for n in range(250)]
    batches = partition_batches(items, 100, seed=4)
    assert [len(b) for b in batches] == [100, 100, 50]
    assert sorted(x for b in batches for x in b) == sorted(items)
    assert batches == partition_batches(items, 100, seed=4)
    assert len(partition_batches(items[:100], 100, seed=0)) == 1
    with pytest.raises(ValueError):
        partition_batches([], 10, 0)


def test_cluster_prompt():
    req = build_cluster_prompt("G", ["a", "b", "c"])
    assert "MEANINGFUL and INSIGHTFUL THEMES" in req.system_prompt
    assert "G" in req.system_prompt and "{Goal" not in req.system_prompt
    assert req.user_prompt.splitlines() == ["a", "b", "c"]


def test_parse_direct():
    r = parse_cluster_response('{"Sales tactics":["quota pressure","contest prize"]}', ["quota pressure", "contest prize"])
    assert r.clusters == {"Sales tactics": ["quota pressure", "contest prize"]} and not r.anomalies


def test_parse_foreign_member_dropped():
    r = parse_cluster_response('{"T": ["a", "hallucinated x"]}', ["a"])
    assert r.clusters == {"T": ["a"]}
    assert any("hallucinated x" in a for a in r.anomalies)


def test_parse_missing_item_backfilled():
    r = parse_cluster_response('{"T": ["a"]}', ["a", "orphan"])
    assert r.clusters == {"T": ["a"], "orphan": ["orphan"]}


def test_parse_matches_by_normalized_form_and_keeps_batch_spelling():
    r = parse_cluster_response('```json\n{"T": ["Quota Pressure!"]}\n```', ["quota pressure"])
    assert r.clusters == {"T": ["quota pressure"]}


def test_parse_duplicate_keys_merge():
    r = parse_cluster_response('{"T": ["a"], "T": ["b"]}', ["a", "b"])
    assert r.clusters == {"T": ["a", "b"]}


def test_parse_errors():
    with pytest.raises(ClusterParseError):
        parse_cluster_response("no json here", ["a"])
    with pytest.raises(ClusterParseError):
        parse_cluster_response("{}", ["a"])
    with pytest.raises(ClusterParseError):
        parse_cluster_response('{"T": ["a"', ["a"])


def test_cluster_batch_falls_back_to_singletons():
    chat = ScriptedChat("sorry, cannot do that")
    r = cluster_batch("g", ["a", "b"], _gw(chat))
    assert r.clusters == {"a": ["a"], "b": ["b"]}
    assert len(chat.calls) == 2


def test_single_label_is_fixed_point():
    run = run_hierarchical_clustering([("only", ["s1"])], "g", ClusterConfig(), _gw(HeuristicChatModel()))
    assert run.stop_reason == STOP_FIXED_POINT
    assert len(run.iterations) == 1 and run.final_themes[0].phrase == "only"


def test_max_iterations_stop():
    pool = [(f"label {i:02d}", [f"s{i}"]) for i in range(40)]
    run = run_hierarchical_clustering(pool, "g", ClusterConfig(max_iterations=2, theme_threshold=1),
                                      _gw(HeuristicChatModel()))
    assert run.stop_reason == STOP_MAX_ITERATIONS
    assert [len(level) for level in run.iterations] == [20, 10]


def test_gateway_failures_pass_through():
    chat = ScriptedChat("x", failures=[RuntimeError("down")] * 10)
    pool = [("a", ["s1"]), ("b", ["s2"])]
    run = run_hierarchical_clustering(pool, "g", ClusterConfig(), _gw(chat))
    assert run.stop_reason == STOP_FIXED_POINT
    assert sorted(t.phrase for t in run.final_themes) == ["a", "b"]


def test_duplicate_normalized_pool_labels_rejected():
    with pytest.raises(ValueError):
        run_hierarchical_clustering([("A", ["s"]), ("a", ["t"])], "g", ClusterConfig(), _gw(HeuristicChatModel()))


def test_same_named_themes_across_batches_merge():
    pool = [(f"x{i}", [f"s{i}"]) for i in range(4)]
    chat = ScriptedChat(lambda r: json.dumps({"Same": r.user_prompt.splitlines()}))
    run = run_hierarchical_clustering(pool, "g", ClusterConfig(batch_size=2, theme_threshold=1), _gw(chat))
    first = run.iterations[0]
    assert len(first) == 1 and sorted(first[0].children) == ["x0", "x1", "x2", "x3"]
    assert first[0].segment_support == 4


def _run_10():
    pool = [(f"label {c}", [f"s{i}", f"s{i // 2}"]) for i, c in enumerate("abcdefghij")]
    return pool, run_hierarchical_clustering(pool, "g", ClusterConfig(theme_threshold=3), _gw(HeuristicChatModel()))


def test_trace_depths_and_support():
    pool, run = _run_10()
    assert [len(level) for level in run.iterations] == [5, 3]
    top = run.final_themes[0]
    shallow = trace_theme(run, top.theme_id, depth=1)
    assert [c["theme_id"] for c in shallow["children"]] == top.children
    assert all("children" not in c for c in shallow["children"])
    full = trace_theme(run, top.theme_id)
    leaves = flatten_trace(full)
    assert len({s for leaf in leaves for s in leaf["segment_ids"]}) == top.segment_support
    assert sorted(leaf["label"] for leaf in leaves) == sorted(run.leaf_labels(top.theme_id))
    with pytest.raises(LookupFailure):
        trace_theme(run, "L9-T9")


def test_distribution_sums_to_pool_and_ties_by_phrase():
    pool, run = _run_10()
    rows = theme_distribution(run)
    assert sum(n for _, n, _ in rows) == len(pool)
    keys = [(-n, t.phrase) for t, n, _ in rows]
    assert keys == sorted(keys)


def test_run_roundtrip():
    _, run = _run_10()
    again = HierarchyRun.from_dict(json.loads(json.dumps(run.to_dict())))
    assert again.to_dict() == run.to_dict()
    assert [t.segment_support for t in again.final_themes] == [t.segment_support for t in run.final_themes]
