from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from inductive_coding.errors import ConfigurationError, IntegrityError, TransientError, TransportError
from inductive_coding.gateway import (
    ChatRequest,
    EmbeddingVector,
    Gateway,
    GatewayConfig,
    OpenAICompatibleProvider,
    cosine_similarity,
    make_providers,
)
from inductive_coding.scripted import HashEmbedder, HeuristicChatModel, ScriptedChat, ScriptedEmbedder


def _gw(tmp_path=None, chat=None, embed=None, **cfg) -> Gateway:
    cache = str(tmp_path / "cache") if tmp_path is not None else None
    return Gateway(GatewayConfig("scripted://none", model_id="m", cache_dir=cache, **cfg),
                   chat_provider=chat, embed_provider=embed, sleep=lambda s: None)


def test_passthrough():
    gw = _gw(chat=ScriptedChat("LABEL: [X]"))
    resp = gw.complete(gw.request("s", "u"))
    assert resp.text == "LABEL: [X]" and not resp.cached and resp.finish_reason == "stop"


def test_cache_hit_second_time(tmp_path):
    chat = ScriptedChat(lambda r: f"echo {r.user_prompt}")
    gw = _gw(tmp_path, chat=chat)
    a = gw.complete(gw.request("s", "u"))
    b = gw.complete(gw.request("s", "u"))
    assert b.cached and b.text == a.text and len(chat.calls) == 1
    assert gw.stats.cache_hits == 1 and gw.stats.upstream_calls == 1


def test_cache_key_ignores_max_tokens_but_not_attempt():
    base = ChatRequest("m", "s", "u", 0.0, 100)
    assert base.cache_key() == ChatRequest("m", "s", "u", 0.0, 900).cache_key()
    assert base.cache_key() != ChatRequest("m", "s", "u", 0.5, 100).cache_key()
    assert base.cache_key() != ChatRequest("m", "s", "u", 0.0, 100, attempt=1).cache_key()


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", "", "u")
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", temperature=-1)


def test_error_replies_are_not_cached(tmp_path):
    class Flaky:
        n = 0

        def chat(self, req):
            from inductive_coding.gateway import ProviderReply

            self.n += 1
            return ProviderReply("", "error" if self.n == 1 else "stop", 0, 0)

    p = Flaky()
    gw = _gw(tmp_path, chat=p)
    assert gw.complete(gw.request("s", "u")).finish_reason == "error"
    assert gw.complete(gw.request("s", "u")).finish_reason == "stop"
    assert p.n == 2


def test_backoff_is_exponential():
    sleeps = []
    chat = ScriptedChat("ok", failures=[True, True, True])
    gw = Gateway(GatewayConfig("x", max_retries=3, backoff_base_ms=500), chat_provider=chat, sleep=sleeps.append)
    assert gw.complete(gw.request("s", "u")).text == "ok"
    assert sleeps == [0.5, 1.0, 2.0]


def test_transport_error_carries_attempts():
    gw = _gw(chat=ScriptedChat("ok", failures=[True]), max_retries=0)
    with pytest.raises(TransportError) as info:
        gw.complete(gw.request("s", "u"))
    assert info.value.attempts == 1


def test_embed_order_and_unit_norm():
    emb = ScriptedEmbedder({"a": [3, 4], "b": [0, 2]})
    gw = _gw(embed=emb)
    va, vb = gw.embed_batch(["a", "b"])
    assert np.allclose(va.values, [0.6, 0.8]) and np.allclose(vb.values, [0, 1])
    assert abs(np.linalg.norm(va.values) - 1) < 1e-6


def test_orthogonal_fixture():
    gw = _gw(embed=ScriptedEmbedder({"a": [1, 0], "b": [0, 1]}))
    a, b = gw.embed_batch(["a", "b"])
    assert cosine_similarity(a, b) == 0.0
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-6)


def test_embed_cache_is_bitwise_stable(tmp_path):
    emb = ScriptedEmbedder(lambda t: [0.1, 0.7, 0.3])
    first = _gw(tmp_path, embed=emb).embed_batch(["a"])[0]
    second = _gw(tmp_path, embed=ScriptedEmbedder(lambda t: [9, 9, 9])).embed_batch(["a"])[0]
    assert first.values.tobytes() == second.values.tobytes()


def test_batch_limit_chunks_and_preserves_order():
    emb = ScriptedEmbedder(lambda t: [1.0, float(int(t))], batch_limit=100)
    gw = _gw(embed=emb)
    texts = [str(i) for i in range(250)]
    out = gw.embed_batch(texts)
    assert [len(c) for c in emb.calls] == [100, 100, 50]
    assert [v.values[1] / v.values[0] for v in out] == pytest.approx([float(i) for i in range(250)])


def test_duplicate_texts_embedded_once():
    emb = ScriptedEmbedder(lambda t: [1, 0])
    _gw(embed=emb).embed_batch(["a", "a", "a"])
    assert emb.calls == [["a"]]


def test_dimension_mismatch_is_integrity_error(tmp_path):
    gw = _gw(tmp_path, embed=ScriptedEmbedder({"a": [1, 0], "b": [1, 0, 0]}))
    with pytest.raises(IntegrityError):
        gw.embed_batch(["a", "b"])
    # nothing from the bad batch was cached
    assert not (tmp_path / "cache" / "embed").exists()


def test_zero_vector_rejected():
    with pytest.raises(IntegrityError):
        EmbeddingVector.from_raw("m", [0, 0])


def test_cosine_examples_and_dims():
    a = EmbeddingVector.from_raw("m", [0.6, 0.8])
    b = EmbeddingVector.from_raw("m", [0.8, 0.6])
    assert cosine_similarity(a, b) == pytest.approx(0.96)
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    with pytest.raises(IntegrityError):
        cosine_similarity(a, EmbeddingVector.from_raw("m", [1, 0, 0]))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        GatewayConfig("x", max_concurrency=0)
    with pytest.raises(ValueError):
        GatewayConfig.from_dict({"endpoint_url": "x", "bogus": 1})
    cfg = GatewayConfig("x", model_id="m", max_retries=1)
    assert GatewayConfig.from_dict(cfg.to_dict()) == cfg


def test_make_providers_schemes(monkeypatch):
    chat, emb = make_providers(GatewayConfig("scripted://heuristic"))
    assert isinstance(chat, HeuristicChatModel) and isinstance(emb, HashEmbedder)
    assert make_providers(GatewayConfig("scripted://hash"))[0] is None
    with pytest.raises(ConfigurationError):
        make_providers(GatewayConfig("ftp://nowhere"))
    with pytest.raises(ConfigurationError):
        make_providers(GatewayConfig("https://api.example.com/v1"))  # no model id
    monkeypatch.delenv("NO_SUCH_KEY_VAR", raising=False)
    with pytest.raises(ConfigurationError):
        make_providers(GatewayConfig("https://api.example.com/v1", model_id="m", api_key_env="NO_SUCH_KEY_VAR"))
    with pytest.raises(ConfigurationError):
        make_providers(GatewayConfig("python://no_such_module_xyz:factory"))


# -- HTTP provider through httpx.MockTransport ---------------------------------------


def _http(handler, **cfg):
    config = GatewayConfig("https://llm.test/v1", model_id="m", **cfg)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAICompatibleProvider(config, client=client), config


def test_http_chat_wire_format(monkeypatch):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "LABEL: [x]"}, "finish_reason": "length"}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3},
        })

    monkeypatch.setenv("TEST_KEY", "sekret")
    provider, cfg = _http(handler, api_key_env="TEST_KEY")
    reply = provider.chat(ChatRequest("m", "sys", "user", 0.0, 64))
    assert seen["url"] == "https://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"]["messages"] == [
        {"role": "system", "content": "sys"}, {"role": "user", "content": "user"}
    ]
    assert seen["body"]["max_tokens"] == 64 and seen["body"]["temperature"] == 0.0
    assert (reply.text, reply.finish_reason, reply.prompt_tokens, reply.completion_tokens) == (
        "LABEL: [x]", "length", 12, 3,
    )


@pytest.mark.parametrize("status,error", [(429, TransientError), (503, TransientError), (401, ConfigurationError),
                                          (400, ConfigurationError)])
def test_http_status_mapping(status, error):
    provider, _ = _http(lambda r: httpx.Response(status, text="nope"))
    with pytest.raises(error):
        provider.chat(ChatRequest("m", "s", "u"))


def test_http_retry_then_success_through_gateway():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(500)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}, "finish_reason": "stop"}]})

    provider, cfg = _http(handler, max_retries=3)
    gw = Gateway(cfg, chat_provider=provider, sleep=lambda s: None)
    assert gw.complete(gw.request("s", "u")).text == "ok"
    assert len(calls) == 3 and gw.stats.retries == 2


def test_http_4xx_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(404, text="no such model")

    provider, cfg = _http(handler, max_retries=3)
    gw = Gateway(cfg, chat_provider=provider, sleep=lambda s: None)
    with pytest.raises(ConfigurationError):
        gw.complete(gw.request("s", "u"))
    assert len(calls) == 1


def test_http_embeddings_sorted_by_index():
    def handler(request):
        body = json.loads(request.content)
        assert body == {"model": "m", "input": ["a", "b"]}
        return httpx.Response(200, json={"data": [
            {"index": 1, "embedding": [0, 1]}, {"index": 0, "embedding": [1, 0]},
        ]})

    provider, _ = _http(handler)
    assert provider.embed("m", ["a", "b"]) == [[1, 0], [0, 1]]


def test_http_transport_failure_is_transient():
    def handler(request):
        raise httpx.ConnectError("refused")

    provider, _ = _http(handler)
    with pytest.raises(TransientError):
        provider.chat(ChatRequest("m", "s", "u"))
