"""Gateway behavior: caching, retries, rate limiting, JSON extraction."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkdoc.llmgate import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayError,
    JsonExtractError,
    MockProvider,
    Provider,
    RequestTag,
    ResponseCache,
    TransientProviderError,
    cache_key,
    complete_json,
    estimate_requests,
    extract_json,
)


def make_request(content="hello", rep=0, temperature=0.2, model="m"):
    return ChatRequest(
        model_id=model,
        messages=(ChatMessage("user", content),),
        temperature=temperature,
        tag=RequestTag.DOCGEN,
        repetition_index=rep,
    )


class FlakyProvider(Provider):
    def __init__(self, failures: int, text: str = "ok"):
        self.failures = failures
        self.calls = 0
        self.text = text

    def send(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientProviderError("boom")
        return ChatResponse(text=self.text)


class TestRequestValidation:
    def test_needs_user_message(self):
        with pytest.raises(GatewayError):
            ChatRequest("m", (ChatMessage("system", "s"),), 0.2, RequestTag.JUDGE)

    def test_temperature_nonnegative(self):
        with pytest.raises(GatewayError):
            make_request(temperature=-0.1)

    def test_bad_role(self):
        with pytest.raises(GatewayError):
            ChatMessage("wizard", "hi")


class TestCache:
    def test_second_identical_request_cached(self, tmp_path):
        provider = MockProvider(scripted=["first"])
        gateway = Gateway(provider=provider, cache_dir=tmp_path / "cache")
        first = gateway.complete(make_request())
        second = gateway.complete(make_request())
        assert not first.cached
        assert second.cached
        assert second.text == "first"
        assert provider.call_count == 1
        assert gateway.stats.cache_hits == 1
        assert gateway.stats.network_calls == 1

    def test_repetition_index_distinguishes_entries(self, tmp_path):
        provider = MockProvider(handler=lambda r: f"rep {r.repetition_index}")
        gateway = Gateway(provider=provider, cache_dir=tmp_path / "cache")
        for rep in range(10):
            gateway.complete(make_request(rep=rep))
        assert provider.call_count == 10
        assert len(list((tmp_path / "cache").glob("*.json"))) == 10
        keys = {cache_key(make_request(rep=rep)) for rep in range(10)}
        assert len(keys) == 10

    def test_warm_cache_survives_new_gateway(self, tmp_path):
        cache_dir = tmp_path / "cache"
        Gateway(MockProvider(scripted=["once"]), cache_dir=cache_dir).complete(make_request())
        fresh_provider = MockProvider(scripted=["never used"])
        gateway = Gateway(fresh_provider, cache_dir=cache_dir)
        response = gateway.complete(make_request())
        assert response.cached
        assert response.text == "once"
        assert fresh_provider.call_count == 0

    def test_cache_records_are_append_only(self, tmp_path):
        cache = ResponseCache(tmp_path / "c")
        request = make_request()
        key = cache_key(request)
        cache.put(key, request, ChatResponse(text="v1"))
        cache.put(key, request, ChatResponse(text="v2"))
        assert cache.get(key).text == "v1"

    def test_key_depends_on_identity_fields(self):
        base = cache_key(make_request())
        assert cache_key(make_request(content="other")) != base
        assert cache_key(make_request(model="m2")) != base
        assert cache_key(make_request(temperature=0.9)) != base
        assert cache_key(make_request(rep=1)) != base
        assert cache_key(make_request()) == base


class TestRetries:
    def test_transient_failures_retried_with_monotone_backoff(self):
        delays: list[float] = []
        provider = FlakyProvider(failures=2)
        gateway = Gateway(provider, max_attempts=4, sleeper=delays.append)
        response = gateway.complete(make_request())
        assert response.text == "ok"
        assert provider.calls == 3
        assert gateway.stats.retries == 2
        assert delays == sorted(delays)
        assert len(delays) == 2

    def test_exhausted_retries_raise(self):
        provider = FlakyProvider(failures=99)
        gateway = Gateway(provider, max_attempts=3, sleeper=lambda _: None)
        with pytest.raises(GatewayError):
            gateway.complete(make_request())
        assert provider.calls == 3

    def test_rate_limit_spacing(self):
        # With a no-op sleeper wall time never advances, so requested waits
        # accumulate in multiples of the spacing.
        sleeps: list[float] = []
        provider = MockProvider(handler=lambda r: "x")
        gateway = Gateway(provider, rate_limit_per_s=100.0, sleeper=sleeps.append)
        for rep in range(3):
            gateway.complete(make_request(rep=rep))
        assert len(sleeps) == 2
        assert sleeps == sorted(sleeps)
        assert all(0 < s <= 0.021 for s in sleeps)


class TestExtractJson:
    def test_fenced(self):
        assert extract_json("```json\n{\"k\":1}\n```") == {"k": 1}

    def test_prose_wrapped(self):
        assert extract_json('Sure! Here it is: {"k":[1,2]} Hope that helps.') == {
            "k": [1, 2]
        }

    def test_no_json_errors(self):
        with pytest.raises(JsonExtractError):
            extract_json("no json here")

    def test_array_payload(self):
        assert extract_json("answer: [1, 2, 3] done") == [1, 2, 3]

    def test_braces_inside_strings(self):
        payload = '{"text": "a } tricky { value", "n": 1}'
        assert extract_json(f"prefix {payload} suffix") == {
            "text": "a } tricky { value",
            "n": 1,
        }

    def test_first_balanced_wins(self):
        assert extract_json('{"a":1} {"b":2}') == {"a": 1}

    def test_unbalanced_then_balanced(self):
        assert extract_json('{"broken": } then {"ok": true}') == {"ok": True}

    @given(
        st.recursive(
            st.none() | st.booleans() | st.integers() | st.text(max_size=8),
            lambda children: st.lists(children, max_size=3)
            | st.dictionaries(st.text(max_size=5), children, max_size=3),
            max_leaves=8,
        )
    )
    @settings(max_examples=150, deadline=None)
    def test_round_trips_wrapped_json(self, value):
        blob = json.dumps({"wrap": value})
        assert extract_json(f"Some chatter.\n```json\n{blob}\n```\nbye") == {
            "wrap": value
        }


class TestCompleteJson:
    def test_repair_requery_once(self):
        provider = MockProvider(scripted=["not json at all", '{"fixed": true}'])
        gateway = Gateway(provider, cache_dir=None)
        payload, response = complete_json(gateway, make_request())
        assert payload == {"fixed": True}
        assert provider.call_count == 2
        repair = provider.requests[1]
        assert repair.messages[-2].role == "assistant"
        assert "JSON" in repair.messages[-1].content

    def test_fails_after_repair(self):
        provider = MockProvider(scripted=["junk", "more junk"])
        gateway = Gateway(provider, cache_dir=None)
        with pytest.raises(JsonExtractError):
            complete_json(gateway, make_request())


class TestEstimateRequests:
    def test_full_reference_grid(self):
        assert estimate_requests(2002, 4, 16, 10) == 1_281_280

    def test_unit(self):
        assert estimate_requests(1, 1, 1, 1) == 1

    def test_small_grid(self):
        assert estimate_requests(10, 2, 16, 10) == 3_200

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            estimate_requests(0, 4, 16, 10)


class FakeHttpResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text or json.dumps(payload)

    def json(self):
        return self._payload


class TestOpenAIChatProvider:
    def _provider(self, monkeypatch):
        from chunkdoc.llmgate import OpenAIChatProvider

        monkeypatch.setenv("CHUNKDOC_API_KEY", "test-key")
        return OpenAIChatProvider(base_url="https://llm.example/v1")

    def test_happy_path(self, monkeypatch):
        provider = self._provider(monkeypatch)
        captured = {}

        def fake_post(url, json=None, headers=None, timeout=None):
            captured.update(url=url, body=json, headers=headers)
            return FakeHttpResponse(
                200,
                {
                    "choices": [{"message": {"content": "hello back"}}],
                    "usage": {"prompt_tokens": 12, "completion_tokens": 3},
                },
            )

        monkeypatch.setattr("requests.post", fake_post)
        response = provider.send(make_request("hi"))
        assert response.text == "hello back"
        assert response.prompt_tokens == 12
        assert captured["url"] == "https://llm.example/v1/chat/completions"
        assert captured["headers"]["Authorization"] == "Bearer test-key"
        assert captured["body"]["messages"] == [{"role": "user", "content": "hi"}]

    def test_throttle_is_transient(self, monkeypatch):
        provider = self._provider(monkeypatch)
        monkeypatch.setattr("requests.post", lambda *a, **k: FakeHttpResponse(429, {}))
        with pytest.raises(TransientProviderError):
            provider.send(make_request())

    def test_server_error_is_transient(self, monkeypatch):
        provider = self._provider(monkeypatch)
        monkeypatch.setattr("requests.post", lambda *a, **k: FakeHttpResponse(503, {}))
        with pytest.raises(TransientProviderError):
            provider.send(make_request())

    def test_auth_failure_is_fatal(self, monkeypatch):
        provider = self._provider(monkeypatch)
        monkeypatch.setattr("requests.post", lambda *a, **k: FakeHttpResponse(401, {}))
        with pytest.raises(GatewayError) as excinfo:
            provider.send(make_request())
        assert not isinstance(excinfo.value, TransientProviderError)

    def test_missing_credential_is_fatal(self, monkeypatch):
        from chunkdoc.llmgate import OpenAIChatProvider

        monkeypatch.delenv("CHUNKDOC_API_KEY", raising=False)
        provider = OpenAIChatProvider(base_url="https://llm.example/v1")
        with pytest.raises(GatewayError):
            provider.send(make_request())

    def test_malformed_payload_is_fatal(self, monkeypatch):
        provider = self._provider(monkeypatch)
        monkeypatch.setattr(
            "requests.post", lambda *a, **k: FakeHttpResponse(200, {"oops": 1})
        )
        with pytest.raises(GatewayError):
            provider.send(make_request())


class TestMockProvider:
    def test_scripted_contract(self):
        provider = MockProvider(scripted=['{"a1b2c3d4": "does X"}'])
        gateway = Gateway(provider, cache_dir=None)
        assert gateway.complete(make_request()).text == '{"a1b2c3d4": "does X"}'

    def test_script_exhaustion(self):
        provider = MockProvider(scripted=[])
        with pytest.raises(GatewayError):
            Gateway(provider, cache_dir=None).complete(make_request())

    def test_needs_exactly_one_behavior(self):
        with pytest.raises(GatewayError):
            MockProvider()
        with pytest.raises(GatewayError):
            MockProvider(handler=lambda r: "x", scripted=["y"])
