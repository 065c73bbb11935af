"""Gateway backends: request modeling, HTTP retry behavior, the
deterministic stub, and transcript record/replay."""

from __future__ import annotations

import json

import httpx
import pytest

from gsi_engine.gateway import (
    BadRequest,
    ChatRequest,
    ExhaustedRetries,
    GatewayConfig,
    HttpGateway,
    RecordingGateway,
    ReplayGateway,
    ServiceError,
    StubGateway,
    TranscriptMiss,
    stub_gateway,
    sum_usage,
    user_request,
    with_chat_model,
)

FROZEN_CHAT_SEED42 = "stub-answer-81e318c786c2 rating 5"
FROZEN_CHAT_SEED7 = "stub-answer-f6ba2582e134 rating 2"
FROZEN_EMBED_SEED42_HEAD = (
    -0.2053551691799719,
    0.07880596881876506,
    -0.1331205781880492,
    -0.0056300104075009015,
)


class TestChatRequest:
    def test_roles_must_alternate_starting_user(self):
        ChatRequest(messages=(("user", "a"), ("assistant", "b"), ("user", "c")))
        with pytest.raises(BadRequest):
            ChatRequest(messages=(("assistant", "a"),))
        with pytest.raises(BadRequest):
            ChatRequest(messages=(("user", "a"), ("user", "b")))

    def test_empty_rejected(self):
        with pytest.raises(BadRequest):
            ChatRequest(messages=())

    def test_user_request_builds_history(self):
        request = user_request("now", system="sys", history=[("q1", "a1")])
        assert request.messages == (("user", "q1"), ("assistant", "a1"), ("user", "now"))
        assert request.system == "sys"

    def test_canonical_json_is_stable(self):
        a = user_request("hello").canonical_json()
        b = user_request("hello").canonical_json()
        assert a == b
        assert json.loads(a)["messages"] == [["user", "hello"]]


class TestStubGateway:
    def test_frozen_chat_replies(self):
        assert StubGateway(seed=42).chat(user_request("what is a rain garden?")).text == FROZEN_CHAT_SEED42
        assert StubGateway(seed=7).chat(user_request("what is a rain garden?")).text == FROZEN_CHAT_SEED7

    def test_chat_is_pure(self):
        gateway = StubGateway(seed=3)
        again = StubGateway(seed=3)
        request = user_request("inspect the basin", system="s")
        assert gateway.chat(request).text == again.chat(request).text
        assert gateway.chat(request).text == gateway.chat(request).text

    def test_reply_always_carries_parseable_rating(self):
        gateway = StubGateway(seed=11)
        for i in range(20):
            text = gateway.chat(user_request(f"q{i}")).text
            rating = int(text.rsplit(" ", 1)[1])
            assert 1 <= rating <= 5

    def test_different_seed_differs(self):
        request = user_request("same question")
        assert StubGateway(seed=1).chat(request).text != StubGateway(seed=2).chat(request).text

    def test_frozen_embedding_head(self):
        values = StubGateway(seed=42).embed(["permeable pavement"])[0].values
        assert values[:4] == pytest.approx(FROZEN_EMBED_SEED42_HEAD, abs=1e-15)

    def test_embeddings_unit_norm(self):
        vectors = StubGateway(seed=5).embed(["a", "bb", "ccc"])
        for vector in vectors:
            assert sum(v * v for v in vector.values) == pytest.approx(1.0, abs=1e-12)
            assert vector.dim == 64

    def test_embedding_depends_on_text_not_batch(self):
        gateway = StubGateway(seed=5)
        alone = gateway.embed(["inlet"])[0]
        batched = gateway.embed(["other", "inlet"])[1]
        assert alone.values == batched.values

    def test_empty_text_rejected(self):
        with pytest.raises(BadRequest):
            StubGateway(seed=1).embed(["ok", ""])

    def test_model_names_carry_seed(self):
        gateway = stub_gateway(9)
        assert gateway.chat_model_name == "stub-chat-9"
        assert gateway.embed_model_name == "stub-embed-9-d64"

    def test_with_chat_model_changes_replies_but_not_embeddings(self):
        base = StubGateway(seed=4)
        tuned = with_chat_model(base, "tuned-model")
        request = user_request("question")
        assert tuned.chat_model_name == "tuned-model"
        assert tuned.chat(request).text != base.chat(request).text
        assert tuned.embed(["x"])[0].values == base.embed(["x"])[0].values
        assert tuned.embed_model_name == base.embed_model_name


def _http_gateway(handler, **config_overrides):
    config = GatewayConfig(base_url="http://test", max_retries=2, backoff_base=0.5, **config_overrides)
    sleeps: list[float] = []
    gateway = HttpGateway(config, sleep=sleeps.append, transport=httpx.MockTransport(handler))
    return gateway, sleeps


def _chat_payload(text="hello back"):
    return {"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 2}}


class TestHttpGateway:
    def test_chat_success_parses_reply(self):
        captured = {}

        def handler(request):
            captured["body"] = json.loads(request.content)
            captured["path"] = request.url.path
            return httpx.Response(200, json=_chat_payload())

        gateway, _ = _http_gateway(handler)
        result = gateway.chat(user_request("hi", system="sys"))
        assert result.text == "hello back"
        assert result.usage == {"prompt_tokens": 3, "completion_tokens": 2}
        assert captured["path"] == "/chat/completions"
        assert captured["body"]["messages"][0] == {"role": "system", "content": "sys"}
        assert captured["body"]["messages"][1] == {"role": "user", "content": "hi"}
        assert captured["body"]["model"] == "qwen3-vl-2b-instruct"

    def test_retries_429_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(429, text="slow down")
            return httpx.Response(200, json=_chat_payload())

        gateway, sleeps = _http_gateway(handler)
        assert gateway.chat(user_request("hi")).text == "hello back"
        assert calls["n"] == 2
        assert sleeps == [0.5]

    def test_retries_500_with_exponential_backoff_then_gives_up(self):
        def handler(request):
            return httpx.Response(500, text="boom")

        gateway, sleeps = _http_gateway(handler)
        with pytest.raises(ExhaustedRetries) as excinfo:
            gateway.chat(user_request("hi"))
        assert excinfo.value.attempts == 3
        assert sleeps == [0.5, 1.0]
        assert isinstance(excinfo.value.last, ServiceError)

    def test_client_error_raises_immediately(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(400, text="bad request")

        gateway, sleeps = _http_gateway(handler)
        with pytest.raises(ServiceError) as excinfo:
            gateway.chat(user_request("hi"))
        assert excinfo.value.status == 400
        assert calls["n"] == 1
        assert sleeps == []

    def test_transport_error_retried(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                raise httpx.ConnectError("refused")
            return httpx.Response(200, json=_chat_payload())

        gateway, _ = _http_gateway(handler)
        assert gateway.chat(user_request("hi")).text == "hello back"

    def test_malformed_completion_rejected(self):
        gateway, _ = _http_gateway(lambda request: httpx.Response(200, json={"nope": True}))
        with pytest.raises(ServiceError):
            gateway.chat(user_request("hi"))

    def test_embeddings_reordered_by_index(self):
        def handler(request):
            return httpx.Response(
                200,
                json={
                    "data": [
                        {"index": 1, "embedding": [0.0, 1.0]},
                        {"index": 0, "embedding": [1.0, 0.0]},
                    ]
                },
            )

        gateway, _ = _http_gateway(handler)
        vectors = gateway.embed(["first", "second"])
        assert vectors[0].values == (1.0, 0.0)
        assert vectors[1].values == (0.0, 1.0)

    def test_embedding_count_mismatch_rejected(self):
        gateway, _ = _http_gateway(
            lambda request: httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0]}]})
        )
        with pytest.raises(ServiceError):
            gateway.embed(["a", "b"])

    def test_missing_base_url_rejected(self):
        with pytest.raises(BadRequest):
            HttpGateway(GatewayConfig(base_url=""))

    def test_api_key_header(self):
        captured = {}

        def handler(request):
            captured["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json=_chat_payload())

        config = GatewayConfig(base_url="http://test", api_key="sk-secret")
        gateway = HttpGateway(config, sleep=lambda s: None, transport=httpx.MockTransport(handler))
        gateway.chat(user_request("hi"))
        assert captured["auth"] == "Bearer sk-secret"


class TestGatewayConfig:
    def test_from_env(self, monkeypatch):
        monkeypatch.setenv("GATEWAY_BASE_URL", "http://models.internal")
        monkeypatch.setenv("GATEWAY_API_KEY", "sk-x")
        monkeypatch.setenv("GATEWAY_CHAT_MODEL", "my-chat")
        monkeypatch.setenv("GATEWAY_EMBED_MODEL", "my-embed")
        config = GatewayConfig.from_env()
        assert config.base_url == "http://models.internal"
        assert config.api_key == "sk-x"
        assert config.chat_model == "my-chat"
        assert config.embed_model == "my-embed"

    def test_from_env_defaults(self, monkeypatch):
        for var in ("GATEWAY_BASE_URL", "GATEWAY_API_KEY", "GATEWAY_CHAT_MODEL", "GATEWAY_EMBED_MODEL"):
            monkeypatch.delenv(var, raising=False)
        config = GatewayConfig.from_env()
        assert config.base_url == ""
        assert config.chat_model == "qwen3-vl-2b-instruct"

    def test_validation(self):
        with pytest.raises(BadRequest):
            GatewayConfig(base_url="x", timeout=0)
        with pytest.raises(BadRequest):
            GatewayConfig(base_url="x", max_retries=-1)


class TestTranscripts:
    def test_record_then_replay(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        inner = StubGateway(seed=13)
        recorder = RecordingGateway(inner, path)
        request = user_request("how deep is the basin?")
        chat_text = recorder.chat(request).text
        vectors = recorder.embed(["inlet", "outlet"])

        replay = ReplayGateway(path)
        assert replay.chat(request).text == chat_text
        assert [v.values for v in replay.embed(["inlet", "outlet"])] == [v.values for v in vectors]

    def test_replay_miss_raises(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        RecordingGateway(StubGateway(seed=13), path).chat(user_request("known"))
        replay = ReplayGateway(path)
        with pytest.raises(TranscriptMiss):
            replay.chat(user_request("unknown"))
        with pytest.raises(TranscriptMiss):
            replay.embed(["unknown"])


def test_sum_usage():
    total = sum_usage([{"prompt_tokens": 2, "completion_tokens": 1}, {"prompt_tokens": 3}])
    assert total == {"prompt_tokens": 5, "completion_tokens": 1}
