import threading

import httpx
import pytest

from rhino.llm_client import (
    AuthError,
    ChatRequest,
    FunctionBackend,
    HttpBackend,
    LlmClient,
    Message,
    MockBackend,
    MockMiss,
    NoJsonFound,
    RateLimited,
    RecordingBackend,
    RetryPolicy,
    ServerError,
    extract_json,
    request_digest,
)


def req(text="hi", temperature=0.0, **kw):
    return ChatRequest(model="m", messages=(Message("user", text),), temperature=temperature, **kw)


class TestDigest:
    def test_stable(self):
        assert request_digest(req()) == request_digest(req())

    def test_temperature_matters(self):
        assert request_digest(req(temperature=0.0)) != request_digest(req(temperature=0.7))

    def test_order_matters(self):
        a = ChatRequest("m", (Message("system", "x"), Message("user", "y")))
        b = ChatRequest("m", (Message("user", "y"), Message("system", "x")))
        assert request_digest(a) != request_digest(b)

    def test_whitespace_normalised(self):
        assert request_digest(req("a  b\n c")) == request_digest(req("a b c"))

    def test_max_tokens_ignored(self):
        assert request_digest(req(max_tokens=10)) == request_digest(req(max_tokens=20))


class TestRequest:
    def test_validation(self):
        with pytest.raises(ValueError):
            ChatRequest("m", ())
        with pytest.raises(ValueError):
            ChatRequest("m", (Message("assistant", "x"),))
        with pytest.raises(ValueError):
            req(temperature=-1)

    def test_accepts_dicts(self):
        r = ChatRequest("m", ({"role": "user", "content": "x"},))
        assert r.messages[0] == Message("user", "x")


class TestMock:
    def test_cache_semantics(self, tmp_path):
        (tmp_path / f"{request_digest(req())}.txt").write_text("hello")
        client = LlmClient(MockBackend(tmp_path))
        first = client.complete(req())
        second = client.complete(req())
        assert (first.content, first.cached) == ("hello", False)
        assert (second.content, second.cached) == ("hello", True)
        assert client.usage.calls == 2 and client.usage.cached_calls == 1

    def test_miss_names_digest(self, tmp_path):
        with pytest.raises(MockMiss) as exc:
            LlmClient(MockBackend(tmp_path)).complete(req())
        assert request_digest(req()) in str(exc.value)

    def test_disk_cache(self, tmp_path):
        backend = FunctionBackend(lambda r: "answer")
        LlmClient(backend, cache_dir=tmp_path / "c").complete(req())
        again = LlmClient(backend, cache_dir=tmp_path / "c").complete(req())
        assert again.cached and again.content == "answer" and backend.calls == 1

    def test_cache_disabled(self):
        backend = FunctionBackend(lambda r: "x")
        client = LlmClient(backend, cache=False)
        client.complete(req())
        client.complete(req())
        assert backend.calls == 2

    def test_recording_round_trip(self, tmp_path):
        LlmClient(RecordingBackend(FunctionBackend(lambda r: "rec"), tmp_path)).complete(req())
        assert LlmClient(MockBackend(tmp_path)).complete(req()).content == "rec"


def http_backend(handler, **kw):
    return HttpBackend("http://llm.test/v1", api_key="k", client=httpx.Client(transport=httpx.MockTransport(handler)), **kw)


def ok(content="fine"):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}})


class TestHttp:
    def test_retries_429_then_success(self):
        statuses = iter([429, 429, 200])
        seen = []

        def handler(request):
            seen.append(request)
            code = next(statuses)
            return ok() if code == 200 else httpx.Response(code)

        waits = []
        client = LlmClient(http_backend(handler), sleep=waits.append)
        resp = client.complete(req())
        assert resp.content == "fine" and resp.prompt_tokens == 3
        assert waits == [1.0, 2.0]
        assert seen[0].url == "http://llm.test/v1/chat/completions"
        assert seen[0].headers["authorization"] == "Bearer k"

    def test_gives_up_after_five(self):
        waits = []
        client = LlmClient(http_backend(lambda r: httpx.Response(429)), sleep=waits.append)
        with pytest.raises(RateLimited):
            client.complete(req())
        assert waits == [1.0, 2.0, 4.0, 8.0]

    def test_server_error_retried(self):
        statuses = iter([503, 200])
        client = LlmClient(http_backend(lambda r: ok() if next(statuses) == 200 else httpx.Response(503)), sleep=lambda s: None)
        assert client.complete(req()).content == "fine"

    def test_auth_not_retried(self):
        calls = []

        def handler(r):
            calls.append(r)
            return httpx.Response(401)

        with pytest.raises(AuthError):
            LlmClient(http_backend(handler), sleep=lambda s: None).complete(req())
        assert len(calls) == 1

    def test_missing_key(self, monkeypatch):
        monkeypatch.delenv("RHINO_API_KEY", raising=False)
        with pytest.raises(AuthError):
            HttpBackend("http://x")

    def test_key_from_env(self, monkeypatch):
        monkeypatch.setenv("RHINO_API_KEY", "secret")
        assert HttpBackend("http://x").api_key == "secret"

    def test_transport_error(self):
        def handler(r):
            raise httpx.ConnectError("down")

        with pytest.raises(ServerError):
            LlmClient(http_backend(handler), retry=RetryPolicy(max_attempts=2), sleep=lambda s: None).complete(req())


def test_backoff_schedule():
    assert [RetryPolicy().delay(k) for k in range(1, 6)] == [1, 2, 4, 8, 16]


def test_in_flight_bound():
    active = 0
    peak = 0
    lock = threading.Lock()
    gate = threading.Event()

    def slow(r):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        gate.wait(0.05)
        with lock:
            active -= 1
        return "x"

    client = LlmClient(FunctionBackend(slow), cache=False, max_in_flight=2)
    threads = [threading.Thread(target=client.complete, args=(req(str(i)),)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak <= 2


class TestExtractJson:
    def test_fenced(self):
        assert extract_json('```json\n{"a":1}\n```') == {"a": 1}

    def test_prose(self):
        assert extract_json("Here is the result: [1,2]") == [1, 2]

    def test_none(self):
        with pytest.raises(NoJsonFound):
            extract_json("no structure here")

    def test_braces_in_strings(self):
        assert extract_json('say {"a": "x}y", "b": [1]} done') == {"a": "x}y", "b": [1]}

    def test_skips_broken_candidate(self):
        assert extract_json('{not json} then {"ok": true}') == {"ok": True}
