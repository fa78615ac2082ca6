import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from score.errors import (
    ContractError,
    SentimentError,
    TransportError,
    UncachedRequestError,
)
from score.gateway import (
    GatewayConfig,
    LlmGateway,
    SentimentScore,
    extract_json_value,
    hashed_embedding,
    request_digest,
)
from score.index import cosine


def remote_config(**kw):
    defaults = dict(backend="remote", base_url="http://fake.local/v1", model_name="test-model")
    defaults.update(kw)
    return GatewayConfig(**defaults)


class FakeTransport:
    """Scriptable transport: a list of responses or exceptions, call counting."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0
        self.bodies = []

    def __call__(self, url, body, timeout, headers):
        self.calls += 1
        self.bodies.append((url, body))
        action = self.script.pop(0) if len(self.script) > 1 else self.script[0]
        if isinstance(action, Exception):
            raise action
        return action


def chat_reply(text):
    return {"choices": [{"message": {"content": text}}]}


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_remote_backend_requires_base_url():
    from score.errors import ValidationError

    with pytest.raises(ValidationError, match="base_url"):
        GatewayConfig(backend="remote")


def test_cache_mode_requires_cache_dir():
    with pytest.raises(ContractError, match="cache_dir"):
        LlmGateway(GatewayConfig(cache_mode="replay"))


def test_sentiment_score_bounds():
    from score.errors import ValidationError

    SentimentScore(0.0)
    SentimentScore(1.0)
    with pytest.raises(ValidationError):
        SentimentScore(1.2)


# ---------------------------------------------------------------------------
# mock backend
# ---------------------------------------------------------------------------


def test_mock_complete_is_deterministic(mock_gateway):
    assert mock_gateway.complete("same prompt") == mock_gateway.complete("same prompt")
    assert mock_gateway.complete("one") != mock_gateway.complete("two")


def test_mock_embed_is_deterministic(mock_gateway):
    a, b = mock_gateway.embed(["abc"]), mock_gateway.embed(["abc"])
    assert np.array_equal(a[0], b[0])
    assert a[0].shape == (mock_gateway.config.embed_dim,)


def test_mock_embeddings_are_unit_norm(mock_gateway):
    (vec,) = mock_gateway.embed(["some words here"])
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)


def test_lexical_overlap_beats_unrelated_text(mock_gateway):
    fixture = [
        ("The knight carried the silver sword to the castle.",
         "A knight carried a silver sword into the castle."),
        ("Rain fell over the quiet harbor all night.",
         "All night rain fell over the quiet harbor."),
        ("The merchant counted coins in the dusty market.",
         "In the dusty market the merchant counted coins."),
        ("Wolves howled beyond the frozen ridge.",
         "Beyond the frozen ridge the wolves howled."),
        ("She read the ancient letter by candlelight.",
         "By candlelight she read the ancient letter."),
    ]
    for (a, a_like) in fixture:
        va, vlike = mock_gateway.embed([a, a_like])
        for (b, _) in fixture:
            if b == a:
                continue
            (vb,) = mock_gateway.embed([b])
            assert cosine(va, vlike) > cosine(va, vb)


def test_embed_rejects_empty_string(mock_gateway):
    with pytest.raises(ContractError):
        mock_gateway.embed(["ok", ""])


def test_embed_batch_splitting_preserves_order():
    gw = LlmGateway(GatewayConfig(backend="mock", embed_batch_limit=2))
    texts = [f"text number {i}" for i in range(7)]
    split = gw.embed(texts)
    whole = LlmGateway(GatewayConfig(backend="mock")).embed(texts)
    for a, b in zip(split, whole):
        assert np.array_equal(a, b)


def test_mock_sentiment_lexicon_behavior(mock_gateway):
    positive = mock_gateway.score_sentiment("a bright hopeful joyful morning")
    assert positive.value > 0.5
    neutral = mock_gateway.score_sentiment("the chair stood near the table")
    assert neutral.value == 0.5
    negative = mock_gateway.score_sentiment("gloomy dread and bitter sorrow")
    assert negative.value < 0.5


def test_hashed_embedding_distinguishes_word_order_via_bigrams():
    a = hashed_embedding("dog bites man", 64)
    b = hashed_embedding("man bites dog", 64)
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# remote wire format
# ---------------------------------------------------------------------------


def test_remote_complete_parses_chat_reply():
    transport = FakeTransport([chat_reply("hello there")])
    gw = LlmGateway(remote_config(), transport=transport)
    assert gw.complete("hi") == "hello there"
    url, body = transport.bodies[0]
    assert url.endswith("/chat/completions")
    assert body["messages"][0]["content"] == "hi"
    assert body["model"] == "test-model"


def test_remote_embed_parses_and_orders_by_index():
    dim = 3
    reply = {
        "data": [
            {"index": 1, "embedding": [0.0, 1.0, 0.0]},
            {"index": 0, "embedding": [1.0, 0.0, 0.0]},
        ]
    }
    gw = LlmGateway(remote_config(embed_dim=dim), transport=FakeTransport([reply]))
    vectors = gw.embed(["first", "second"])
    assert np.array_equal(vectors[0], [1.0, 0.0, 0.0])
    assert np.array_equal(vectors[1], [0.0, 1.0, 0.0])


def test_remote_embed_dimension_mismatch_is_transport_error():
    reply = {"data": [{"index": 0, "embedding": [1.0, 0.0]}]}
    gw = LlmGateway(remote_config(embed_dim=5), transport=FakeTransport([reply]))
    with pytest.raises(TransportError, match="dimension"):
        gw.embed(["text"])


def test_remote_sentiment_parses_decimal_reply():
    gw = LlmGateway(remote_config(), transport=FakeTransport([chat_reply("0.73")]))
    assert gw.score_sentiment("anything").value == pytest.approx(0.73)


def test_remote_sentiment_clamps_out_of_range():
    gw = LlmGateway(remote_config(), transport=FakeTransport([chat_reply("1.7")]))
    assert gw.score_sentiment("anything").value == 1.0


def test_remote_sentiment_reprompts_once_then_fails():
    transport = FakeTransport([chat_reply("no idea"), chat_reply("still no")])
    gw = LlmGateway(remote_config(), transport=transport)
    with pytest.raises(SentimentError):
        gw.score_sentiment("anything")
    assert transport.calls == 2


def test_retry_backoff_sequence_and_recovery():
    transport = FakeTransport(
        [TransportError("boom1"), TransportError("boom2"), chat_reply("recovered")]
    )
    gw = LlmGateway(remote_config(max_retries=3), transport=transport)
    delays = []
    gw._sleep = delays.append
    assert gw.complete("x") == "recovered"
    assert transport.calls == 3
    assert delays == [0.5, 1.0]  # exponential, factor 2, initial 500ms


def test_retries_exhausted_raises_transport_error():
    transport = FakeTransport([TransportError("down")])
    gw = LlmGateway(remote_config(max_retries=2), transport=transport)
    gw._sleep = lambda _: None
    with pytest.raises(TransportError, match="after 3 attempts"):
        gw.complete("x")
    assert transport.calls == 3


def test_parallelism_bound_is_respected():
    class SlowTransport:
        def __init__(self):
            self.lock = threading.Lock()
            self.calls = 0

        def __call__(self, url, body, timeout, headers):
            with self.lock:
                self.calls += 1
            time.sleep(0.02)
            return chat_reply("ok")

    gw = LlmGateway(remote_config(max_parallel=3), transport=SlowTransport())
    with ThreadPoolExecutor(max_workers=12) as pool:
        list(pool.map(lambda i: gw.complete(f"p{i}"), range(24)))
    assert gw.stats.max_in_flight <= 3
    assert gw.stats.transport_calls == 24


def test_api_key_header_from_environment(monkeypatch):
    seen = {}

    def transport(url, body, timeout, headers):
        seen.update(headers)
        return chat_reply("ok")

    monkeypatch.setenv("SCORE_API_KEY", "sk-test-123")
    LlmGateway(remote_config(), transport=transport).complete("x")
    assert seen.get("Authorization") == "Bearer sk-test-123"


# ---------------------------------------------------------------------------
# cache: record and replay
# ---------------------------------------------------------------------------


def test_record_mode_calls_upstream_once(tmp_path):
    transport = FakeTransport([chat_reply("cached answer")])
    gw = LlmGateway(remote_config(cache_mode="record"), cache_dir=tmp_path, transport=transport)
    first = gw.complete("the prompt")
    second = gw.complete("the prompt")
    assert first == second == "cached answer"
    assert transport.calls == 1
    assert gw.stats.cache_hits == 1 and gw.stats.cache_misses == 1


def test_replay_mode_with_empty_cache_errors_without_network(tmp_path):
    transport = FakeTransport([chat_reply("never")])
    gw = LlmGateway(remote_config(cache_mode="replay"), cache_dir=tmp_path, transport=transport)
    with pytest.raises(UncachedRequestError, match="uncached request"):
        gw.complete("anything")
    assert transport.calls == 0


def test_replay_serves_recorded_responses(tmp_path):
    transport = FakeTransport([chat_reply("original")])
    recorder = LlmGateway(remote_config(cache_mode="record"), cache_dir=tmp_path, transport=transport)
    recorder.complete("p")

    replayer = LlmGateway(
        remote_config(cache_mode="replay"), cache_dir=tmp_path, transport=FakeTransport([chat_reply("fresh")])
    )
    assert replayer.complete("p") == "original"
    assert replayer._transport.calls == 0


def test_cache_layout_is_content_addressed(tmp_path):
    gw = LlmGateway(GatewayConfig(backend="mock", cache_mode="record"), cache_dir=tmp_path)
    gw.complete("addressed")
    files = list(tmp_path.rglob("*.json"))
    assert len(files) == 1
    key = files[0].stem
    assert files[0].parent.name == key[:2]
    payload = json.loads(files[0].read_text())
    assert set(payload) == {"op", "model", "request", "response"}


def test_mock_backend_also_goes_through_replay(tmp_path):
    gw = LlmGateway(GatewayConfig(backend="mock", cache_mode="replay"), cache_dir=tmp_path)
    with pytest.raises(UncachedRequestError):
        gw.embed(["text never recorded"])


def test_request_digest_is_stable_and_distinct():
    a = request_digest("complete", "m", {"x": 1, "y": [1, 2]})
    b = request_digest("complete", "m", {"y": [1, 2], "x": 1})
    c = request_digest("complete", "m", {"x": 2, "y": [1, 2]})
    assert a == b != c


# ---------------------------------------------------------------------------
# reply JSON extraction
# ---------------------------------------------------------------------------


def test_extract_json_value_handles_fences_and_prose():
    assert extract_json_value('```json\n{"a": 1}\n```') == {"a": 1}
    assert extract_json_value('Sure! Here it is: {"a": [1, 2]} hope that helps') == {"a": [1, 2]}
    assert extract_json_value("[1, 2, 3] trailing") == [1, 2, 3]


def test_extract_json_value_rejects_proseless_garbage():
    with pytest.raises(ValueError):
        extract_json_value("no json here at all")
    with pytest.raises(ValueError):
        extract_json_value("{broken: json")
