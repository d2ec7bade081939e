import asyncio
import base64
import logging
import math
import random
from decimal import Decimal, localcontext

import aiohttp
import pytest

from screener import backends
from screener.backends import (
    PLACEHOLDER_PROBABILITY,
    BackendConfig,
    ModelPrediction,
    build_request,
    decide_from_logprobs,
    parse_generated_label,
    predict,
    predict_async,
    predict_many,
    prediction_from_response,
)
from screener.errors import (
    BackendRefused,
    ConfigError,
    InvalidModelOutput,
    NonFiniteLogprob,
    TransportError,
)
from screener.prompting import build_audio_prompt, build_feature_prompt

ENDPOINT = "localhost:8000/v1/chat/completions"


def chat_body(content, top_logprobs=None, token=None, logprob=None):
    """Minimal chat-completion response body."""
    choice = {"index": 0, "message": {"role": "assistant", "content": content}}
    if top_logprobs is not None or token is not None:
        first = {"token": token if token is not None else content, "logprob": logprob if logprob is not None else 0.0,
                 "top_logprobs": [{"token": t, "logprob": lp} for t, lp in (top_logprobs or [])]}
        choice["logprobs"] = {"content": [first]}
    return {"choices": [choice]}


class FakeResponse:
    """
    A fake object that mimics an aiohttp response from a chat-completion server.
    """
    def __init__(self, status=200, body=None, text="", delay=0.0):
        self.status = status
        self._body = body
        self._text = text
        self._delay = delay

    async def json(self, content_type=None):
        if self._body is None:
            raise ValueError("not JSON")
        return self._body

    async def text(self):
        return self._text

    async def __aenter__(self):
        if self._delay:
            await asyncio.sleep(self._delay)
        return self

    async def __aexit__(self, exc_type, exc, tb):
        return False


class FakeSession:
    """
    A fake object that mimics an aiohttp.ClientSession.
    `replies` is either a list consumed in call order (exceptions are raised)
    or a callable mapping the request JSON to a FakeResponse.
    """
    def __init__(self, replies):
        self._replies = replies
        self.requests = []
        self.closed = False

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        if callable(self._replies):
            return self._replies(json)
        reply = self._replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply

    async def close(self):
        self.closed = True


@pytest.fixture
def no_backoff(monkeypatch):
    delays = []

    async def fake_sleep(seconds):
        delays.append(seconds)

    monkeypatch.setattr(backends, "_sleep", fake_sleep)
    return delays


def remote(**kwargs):
    return BackendConfig(kind="remote_chat", endpoint_url=ENDPOINT, model_name="llama", **kwargs)


# Test case 1:
@pytest.mark.parametrize("lp0, lp1, label, probability, tol", [
    (-0.693, -0.693, 1, 0.5, 0.0),
    (-2.4, -0.1, 1, 1.0 / (1.0 + math.exp(-2.3)), 1e-12),
    (-2.4, -0.1, 1, 0.908877, 1e-6),
    (-0.01, -6.0, 0, 0.99751, 1e-5),
])
def test_decide_from_logprobs_examples(lp0, lp1, label, probability, tol):
    """
    Checks the tie rule and the two-candidate softmax on worked examples.
    """
    got_label, got_probability = decide_from_logprobs(lp0, lp1)
    assert got_label == label
    assert got_probability == pytest.approx(probability, abs=tol)


# Test case 2:
def test_decide_from_logprobs_matches_high_precision_reference():
    """
    Checks 10,000 random pairs against a 50-digit decimal softmax, plus shift invariance.
    """
    rng = random.Random(0)
    for _ in range(10000):
        lp0 = rng.uniform(-30.0, 0.0)
        lp1 = rng.uniform(-30.0, 0.0)
        label, probability = decide_from_logprobs(lp0, lp1)
        with localcontext() as ctx:
            ctx.prec = 50
            e0, e1 = Decimal(lp0).exp(), Decimal(lp1).exp()
            reference = float((e1 if label == 1 else e0) / (e0 + e1))
        assert label == (1 if lp1 > lp0 else 0)
        assert probability >= 0.5
        assert abs(probability - reference) < 1e-12

        shift = rng.uniform(-50.0, 50.0)
        shifted_label, shifted_probability = decide_from_logprobs(lp0 + shift, lp1 + shift)
        assert shifted_label == label
        assert abs(shifted_probability - probability) < 1e-12


# Test case 3:
@pytest.mark.parametrize("bad", [(float("nan"), -1.0), (-1.0, float("-inf")), (float("inf"), 0.0)])
def test_decide_from_logprobs_rejects_non_finite(bad):
    """
    Checks that non-finite log-probabilities raise NonFiniteLogprob.
    """
    with pytest.raises(NonFiniteLogprob):
        decide_from_logprobs(*bad)


# Test case 4:
@pytest.mark.parametrize("text, label", [
    ("1", 1),
    ("0", 0),
    ("The answer is 0.", 0),
    (" 1\n", 1),
    ("Label: 1 (Parkinson's)", 1),
    ("0 = Healthy", 0),
])
def test_parse_generated_label(text, label):
    """
    Checks that the first standalone 0 or 1 is taken as the label.
    """
    assert parse_generated_label(text) == (label, None)


# Test case 5:
@pytest.mark.parametrize("text", ["The patient scores 10 out of 10", "", "   ", "probability 0.5", "2", "1st"])
def test_parse_generated_label_rejects(text):
    """
    Checks that text without a standalone 0/1 raises InvalidModelOutput.
    """
    with pytest.raises(InvalidModelOutput):
        parse_generated_label(text)


# Test case 6:
def test_prediction_from_logprobs_prefers_best_candidate_token():
    """
    Checks that candidate logprobs (with and without a leading space) decide the label.
    """
    body = chat_body("1", top_logprobs=[("1", -0.1), (" 1", -0.05), ("0", -2.4), ("The", -5.0)])
    prediction = prediction_from_response(body)
    assert prediction.source == "logprobs"
    assert prediction.label == 1
    assert prediction.logprob_1 == -0.05 and prediction.logprob_0 == -2.4
    assert prediction.probability == pytest.approx(1.0 / (1.0 + math.exp(-2.35)))


# Test case 7:
def test_prediction_from_text_with_top_token_probability():
    """
    Checks that without both candidates the text decides and the top-token probability is kept.
    """
    body = chat_body("0", top_logprobs=[("0", math.log(0.8))], token="0", logprob=math.log(0.8))
    prediction = prediction_from_response(body)
    assert prediction.source == "generated_text"
    assert prediction.label == 0
    assert prediction.probability == pytest.approx(0.8)
    assert not prediction.placeholder_probability


# Test case 8:
def test_prediction_placeholder_probability_is_flagged(caplog):
    """
    Checks that text without any probability gets the flagged placeholder and a warning.
    """
    with caplog.at_level(logging.WARNING, logger="screener.backends"):
        prediction = prediction_from_response(chat_body("The answer is 1"))
    assert prediction.label == 1
    assert prediction.probability == PLACEHOLDER_PROBABILITY
    assert prediction.placeholder_probability
    assert "placeholder" in caplog.text


# Test case 9:
def test_prediction_from_malformed_body():
    """
    Checks that a body without choices is an invalid output.
    """
    with pytest.raises(InvalidModelOutput):
        prediction_from_response({"error": "nope"})


# Test case 10:
def test_build_request_feature_and_audio(tmp_path):
    """
    Checks the request JSON for text prompts and the base64 audio part for audio prompts.
    """
    cfg = BackendConfig(kind="remote_audio", endpoint_url=ENDPOINT, model_name="qwen2-audio")
    text = build_request(build_feature_prompt("a: 1"), cfg)
    assert text["model"] == "qwen2-audio"
    assert text["temperature"] == 0 and text["seed"] == 0
    assert text["logprobs"] is True and text["top_logprobs"] == 5 and text["max_tokens"] == 4
    assert text["messages"] == [{"role": "user", "content": build_feature_prompt("a: 1").user_text}]

    wav = tmp_path / "s1.wav"
    wav.write_bytes(b"RIFFdata")
    audio = build_request(build_audio_prompt(wav), cfg)
    parts = audio["messages"][0]["content"]
    assert parts[0]["type"] == "text"
    assert parts[1]["input_audio"] == {"data": base64.b64encode(b"RIFFdata").decode("ascii"), "format": "wav"}


# Test case 11:
def test_backend_config_validation():
    """
    Checks config rules: deterministic decoding, endpoint completion, known kinds.
    """
    assert remote().endpoint_url == "http://" + ENDPOINT
    with pytest.raises(ConfigError):
        BackendConfig(temperature=0.7)
    with pytest.raises(ConfigError):
        BackendConfig(kind="remote_chat")
    with pytest.raises(ConfigError):
        BackendConfig(kind="local_gpu")
    with pytest.raises(ConfigError):
        BackendConfig(kind="remote_chat", endpoint_url="not a url")


# Test case 12:
def test_mock_backends():
    """
    Checks the fixed and threshold oracles, including inversion.
    """
    fixed = predict(build_feature_prompt("a: 1"), BackendConfig(kind="mock_fixed", mock_label=1, mock_probability=0.9))
    assert fixed == ModelPrediction(1, 0.9, "1", "oracle")

    prompt = build_feature_prompt("shimmer_local: 0.1, jitter_local: 0.02")
    cfg = BackendConfig(kind="mock_threshold", mock_feature="jitter_local", mock_threshold=0.01)
    assert predict(prompt, cfg).label == 1
    assert predict(build_feature_prompt("jitter_local: 0.005"), cfg).label == 0
    inverted = BackendConfig(kind="mock_threshold", mock_threshold=0.01, mock_invert=True)
    assert predict(prompt, inverted).label == 0
    with pytest.raises(InvalidModelOutput):
        predict(build_feature_prompt("hnr_mean: 12"), cfg)


@pytest.mark.asyncio
# Test case 13:
async def test_remote_prediction_sends_request():
    """
    Checks one remote call: URL, headers, body and the decoded prediction.
    """
    session = FakeSession([FakeResponse(body=chat_body("1", top_logprobs=[("1", -0.1), ("0", -2.4)]))])
    response = await predict_async(build_feature_prompt("a: 1"), remote(), session)
    assert response.prediction.label == 1
    assert response.attempts == 1
    assert session.requests[0]["url"] == "http://" + ENDPOINT
    assert session.requests[0]["json"]["model"] == "llama"
    assert session.requests[0]["headers"]["Content-Type"] == "application/json"


@pytest.mark.asyncio
# Test case 14:
async def test_api_key_header(monkeypatch):
    """
    Checks that a bearer token is read from the configured environment variable.
    """
    monkeypatch.setenv("SCREENER_TEST_KEY", "secret")
    session = FakeSession([FakeResponse(body=chat_body("0", top_logprobs=[("1", -3.0), ("0", -0.1)]))])
    await predict_async(build_feature_prompt("a: 1"), remote(api_key_env="SCREENER_TEST_KEY"), session)
    assert session.requests[0]["headers"]["Authorization"] == "Bearer secret"


@pytest.mark.asyncio
# Test case 15:
async def test_transport_errors_are_retried(no_backoff):
    """
    Checks that transport errors are retried with doubling backoff before succeeding.
    """
    session = FakeSession([
        aiohttp.ClientConnectionError("refused"),
        asyncio.TimeoutError(),
        FakeResponse(body=chat_body("1", top_logprobs=[("1", -0.1), ("0", -2.4)])),
    ])
    response = await predict_async(build_feature_prompt("a: 1"), remote(), session)
    assert response.attempts == 3
    assert no_backoff == [0.5, 1.0]


@pytest.mark.asyncio
# Test case 16:
async def test_transport_error_after_retries(no_backoff):
    """
    Checks that max_retries + 1 failed attempts raise TransportError.
    """
    session = FakeSession([aiohttp.ClientConnectionError("down") for _ in range(4)])
    with pytest.raises(TransportError):
        await predict_async(build_feature_prompt("a: 1"), remote(max_retries=3), session)
    assert len(session.requests) == 4
    assert no_backoff == [0.5, 1.0, 2.0]


@pytest.mark.asyncio
# Test case 17:
async def test_refused_and_unparseable_are_not_retried(no_backoff):
    """
    Checks that a non-2xx status and a non-JSON body fail at once.
    """
    session = FakeSession([FakeResponse(status=503, text="overloaded")])
    with pytest.raises(BackendRefused) as excinfo:
        await predict_async(build_feature_prompt("a: 1"), remote(), session)
    assert excinfo.value.status == 503

    session = FakeSession([FakeResponse(body=None)])
    with pytest.raises(InvalidModelOutput):
        await predict_async(build_feature_prompt("a: 1"), remote(), session)
    assert len(session.requests) == 1
    assert no_backoff == []


@pytest.mark.asyncio
# Test case 18:
async def test_remote_chat_rejects_audio_prompts(tmp_path):
    """
    Checks that a text-only backend refuses audio prompts.
    """
    wav = tmp_path / "s1.wav"
    wav.write_bytes(b"RIFF")
    with pytest.raises(ConfigError):
        await predict_async(build_audio_prompt(wav), remote(), FakeSession([]))


@pytest.mark.asyncio
# Test case 19:
async def test_predict_many_keeps_input_order_and_captures_invalid_output():
    """
    Checks that results line up with inputs even when later requests finish first,
    and that an unparseable answer is recorded for its payload only.
    """
    payloads = [build_feature_prompt(f"idx: {i}") for i in range(8)]

    def reply(request):
        idx = int(request["messages"][0]["content"].split("Input: idx: ")[1].split("\n")[0])
        delay = (8 - idx) * 0.002
        if idx == 5:
            return FakeResponse(body=chat_body("I cannot tell"), delay=delay)
        label = str(idx % 2)
        other = "0" if label == "1" else "1"
        return FakeResponse(body=chat_body(label, top_logprobs=[(label, -0.1), (other, -2.0)]), delay=delay)

    sessions = []

    def factory():
        sessions.append(FakeSession(reply))
        return sessions[-1]

    result = await predict_many(payloads, remote(max_in_flight=3), session_factory=factory)
    assert len(result.responses) == 8
    assert result.responses[5] is None
    assert isinstance(result.errors[5], InvalidModelOutput)
    for i, response in enumerate(result.responses):
        if i != 5:
            assert response.prediction.label == i % 2
            assert result.errors[i] is None
    assert sessions[0].closed


@pytest.mark.asyncio
# Test case 20:
async def test_predict_many_aborts_on_refusal():
    """
    Checks that a refused request aborts the batch.
    """
    def reply(request):
        return FakeResponse(status=401, text="unauthorized")

    with pytest.raises(BackendRefused):
        await predict_many([build_feature_prompt("a: 1")] * 3, remote(), session_factory=lambda: FakeSession(reply))


@pytest.mark.asyncio
# Test case 21:
async def test_predict_many_mock_is_deterministic():
    """
    Checks that mock batches need no session and repeat exactly.
    """
    payloads = [build_feature_prompt(f"jitter_local: {v}") for v in (0.001, 0.05, 0.02, 0.0)]
    cfg = BackendConfig(kind="mock_threshold", mock_threshold=0.01)

    def no_session():
        raise AssertionError("mock backends must not open a session")

    first = await predict_many(payloads, cfg, session_factory=no_session)
    second = await predict_many(payloads, cfg, session_factory=no_session)
    labels = [r.prediction.label for r in first.responses]
    assert labels == [0, 1, 1, 0]
    assert [r.prediction for r in first.responses] == [r.prediction for r in second.responses]


class CountingResponse(FakeResponse):
    """A FakeResponse that keeps its session's count of open responses."""
    def __init__(self, session, **kwargs):
        super().__init__(**kwargs)
        self._session = session

    async def __aenter__(self):
        self._session.open_responses += 1
        try:
            return await super().__aenter__()
        except BaseException:
            self._session.open_responses -= 1
            raise

    async def __aexit__(self, exc_type, exc, tb):
        self._session.open_responses -= 1
        return False


class CountingSession(FakeSession):
    """A FakeSession that remembers how many responses were still open when it was closed."""
    def __init__(self, replies=None):
        super().__init__(replies)
        self.open_responses = 0
        self.open_at_close = None

    async def close(self):
        self.open_at_close = self.open_responses
        await super().close()


@pytest.mark.asyncio
# Test case 22:
async def test_predict_many_abort_settles_requests_before_closing():
    """
    Checks that an aborted batch cancels the slow requests, closes the session only
    once none is open, and tags the error with the failing position.
    """
    payloads = [build_feature_prompt(f"idx: {i}") for i in range(6)]
    session = CountingSession()

    def reply(request):
        idx = int(request["messages"][0]["content"].split("Input: idx: ")[1].split("\n")[0])
        if idx == 2:
            return CountingResponse(session, status=401, text="unauthorized")
        return CountingResponse(session, body=chat_body("1", top_logprobs=[("1", -0.1), ("0", -2.0)]), delay=0.5)

    session._replies = reply
    with pytest.raises(BackendRefused) as excinfo:
        await predict_many(payloads, remote(max_in_flight=6), session_factory=lambda: session)
    assert excinfo.value.payload_index == 2
    assert session.closed
    assert session.open_at_close == 0
    assert len(session.requests) == 6
