"""
Model backends: a chat-completion wire client and local test oracles.

Remote calls go through aiohttp; ``predict_many`` fans a batch out under a
semaphore and returns predictions in input order.
"""

import asyncio
import base64
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import aiohttp

from .errors import (
    BackendFailure,
    BackendRefused,
    ConfigError,
    InvalidModelOutput,
    NonFiniteLogprob,
    TransportError,
)
from .prompting import MODALITY_AUDIO, PromptPayload, extract_serialized, parse_serialized
from .utils import validate_and_complete_url

logger = logging.getLogger(__name__)

KINDS = ("remote_chat", "remote_audio", "mock_threshold", "mock_fixed")
MODEL_TYPES = ("LLM", "LALM", "LARM")

SOURCE_LOGPROBS = "logprobs"
SOURCE_TEXT = "generated_text"
SOURCE_ORACLE = "oracle"

PLACEHOLDER_PROBABILITY = 0.75
TIE_LABEL = 1
BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
TOP_LOGPROBS = 5
MAX_TOKENS = 4

_STANDALONE_LABEL = re.compile(r"(?<![\w.])([01])(?![\w]|\.\d)")

_sleep = asyncio.sleep


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock_fixed"
    endpoint_url: Optional[str] = None
    model_name: str = "mock"
    model_type: str = ""
    temperature: float = 0.0
    seed: int = 0
    request_logprobs: bool = True
    timeout_s: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    api_key_env: str = ""
    mock_label: int = 1
    mock_probability: float = 1.0
    mock_feature: str = "jitter_local"
    mock_threshold: float = 0.01
    mock_invert: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"backend kind must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if self.temperature != 0.0:
            raise ConfigError("decoding is deterministic: temperature must stay 0.0")
        if self.model_type and self.model_type not in MODEL_TYPES:
            raise ConfigError(f"model_type must be one of {', '.join(MODEL_TYPES)}, got {self.model_type!r}")
        if self.max_retries < 0 or self.max_in_flight < 1 or self.timeout_s <= 0:
            raise ConfigError("max_retries >= 0, max_in_flight >= 1 and timeout_s > 0 are required")
        if self.mock_label not in (0, 1):
            raise ConfigError(f"mock_label must be 0 or 1, got {self.mock_label}")
        if not 0.0 <= self.mock_probability <= 1.0:
            raise ConfigError(f"mock_probability must lie in [0, 1], got {self.mock_probability}")
        if self.is_remote:
            if not self.endpoint_url:
                raise ConfigError(f"backend kind {self.kind!r} needs an endpoint_url")
            try:
                object.__setattr__(self, "endpoint_url", validate_and_complete_url(self.endpoint_url))
            except ValueError as e:
                raise ConfigError(f"Invalid endpoint URL '{self.endpoint_url}': {e}") from e

    @property
    def is_remote(self) -> bool:
        return self.kind.startswith("remote_")


@dataclass(frozen=True)
class ModelPrediction:
    label: int
    probability: float
    raw_output: str
    source: str
    logprob_0: Optional[float] = None
    logprob_1: Optional[float] = None
    placeholder_probability: bool = False

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "probability": self.probability,
            "raw_output": self.raw_output,
            "source": self.source,
            "logprob_0": self.logprob_0,
            "logprob_1": self.logprob_1,
            "placeholder_probability": self.placeholder_probability,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ModelPrediction":
        return cls(
            label=int(row["label"]),
            probability=float(row["probability"]),
            raw_output=row.get("raw_output", ""),
            source=row["source"],
            logprob_0=row.get("logprob_0"),
            logprob_1=row.get("logprob_1"),
            placeholder_probability=bool(row.get("placeholder_probability", False)),
        )


@dataclass
class BackendResponse:
    """A prediction together with the raw HTTP body it came from, for the audit log."""

    prediction: ModelPrediction
    raw_body: Optional[dict] = None
    attempts: int = 1


def decide_from_logprobs(logprob_0: float, logprob_1: float) -> Tuple[int, float]:
    """
    Two-candidate softmax over label log-probabilities.

    Args:
        logprob_0 (float): Log-probability of the candidate "0".
        logprob_1 (float): Log-probability of the candidate "1".

    Returns:
        tuple: (label, probability of that label). An exact tie gives (1, 0.5).

    Raises:
        NonFiniteLogprob: If either value is NaN or infinite.
    """
    if not (math.isfinite(logprob_0) and math.isfinite(logprob_1)):
        raise NonFiniteLogprob(f"log-probabilities must be finite, got {logprob_0}, {logprob_1}")
    if logprob_0 == logprob_1:
        return TIE_LABEL, 0.5
    label = 1 if logprob_1 > logprob_0 else 0
    other = logprob_0 if label == 1 else logprob_1
    chosen = logprob_1 if label == 1 else logprob_0
    # exp(chosen - max) == 1; only the loser's term can underflow
    return label, 1.0 / (1.0 + math.exp(other - chosen))


def parse_generated_label(text: str, probability: Optional[float] = None) -> Tuple[int, Optional[float]]:
    """
    Read the label from free text: the first standalone 0 or 1.

    Digits that belong to a longer number ("10", "0.5", "1st") do not count.

    Raises:
        InvalidModelOutput: If the text holds no standalone 0 or 1.
    """
    if not text or not text.strip():
        raise InvalidModelOutput("model returned empty output")
    match = _STANDALONE_LABEL.search(text)
    if match is None:
        raise InvalidModelOutput(f"no standalone 0/1 label in model output {text[:80]!r}")
    return int(match.group(1)), probability


def _candidate_logprobs(top_logprobs: Sequence[dict]) -> Tuple[Optional[float], Optional[float]]:
    best: Dict[str, float] = {}
    for entry in top_logprobs or ():
        token = str(entry.get("token", ""))
        if token in ("0", "1", " 0", " 1"):
            label = token.strip()
            value = float(entry["logprob"])
            best[label] = max(value, best.get(label, -math.inf))
    return best.get("0"), best.get("1")


def prediction_from_response(body: dict) -> ModelPrediction:
    """
    Turn a chat-completion response body into a prediction.

    Logprobs for both candidates decide the label when present. Otherwise
    the generated text is parsed and the probability is taken from the
    top token's logprob, or from the flagged 0.75 placeholder.
    """
    try:
        choice = body["choices"][0]
        content = choice["message"].get("content") or ""
    except (KeyError, IndexError, TypeError, AttributeError) as e:
        raise InvalidModelOutput(f"response has no first choice message: {e}") from e
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))

    tokens = ((choice.get("logprobs") or {}).get("content")) or []
    first = tokens[0] if tokens else None
    if first is not None:
        lp0, lp1 = _candidate_logprobs(first.get("top_logprobs") or [first])
        if lp0 is not None and lp1 is not None:
            label, probability = decide_from_logprobs(lp0, lp1)
            return ModelPrediction(label, probability, content, SOURCE_LOGPROBS, lp0, lp1)

    label, _ = parse_generated_label(content)
    reported = None
    if first is not None and str(first.get("token", "")).strip() == str(label):
        lp = float(first["logprob"])
        if not math.isfinite(lp):
            raise NonFiniteLogprob(f"top-token logprob is {lp}")
        reported = math.exp(lp)

    if reported is None:
        logger.warning("No probability reported for output %r; using placeholder %.2f",
                       content[:40], PLACEHOLDER_PROBABILITY)
        return ModelPrediction(label, PLACEHOLDER_PROBABILITY, content, SOURCE_TEXT,
                               placeholder_probability=True)
    return ModelPrediction(label, min(1.0, reported), content, SOURCE_TEXT)


def build_request(payload: PromptPayload, cfg: BackendConfig) -> dict:
    """Chat-completion request body; audio prompts attach the WAV file as a base64 content part."""
    if payload.modality == MODALITY_AUDIO:
        with open(payload.audio_ref, "rb") as fh:
            encoded = base64.b64encode(fh.read()).decode("ascii")
        content = [
            {"type": "text", "text": payload.user_text},
            {"type": "input_audio", "input_audio": {"data": encoded, "format": "wav"}},
        ]
    else:
        content = payload.user_text

    messages = []
    if payload.system_text:
        messages.append({"role": "system", "content": payload.system_text})
    messages.append({"role": "user", "content": content})

    body = {
        "model": cfg.model_name,
        "temperature": 0,
        "seed": cfg.seed,
        "max_tokens": MAX_TOKENS,
        "messages": messages,
    }
    if cfg.request_logprobs:
        body["logprobs"] = True
        body["top_logprobs"] = TOP_LOGPROBS
    return body


def _headers(cfg: BackendConfig) -> dict:
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env and os.environ.get(cfg.api_key_env):
        headers["Authorization"] = f"Bearer {os.environ[cfg.api_key_env]}"
    return headers


async def _post_with_retries(session, body: dict, cfg: BackendConfig) -> Tuple[dict, int]:
    delay = BACKOFF_BASE_S
    attempts = 0
    while True:
        attempts += 1
        try:
            timeout = aiohttp.ClientTimeout(total=cfg.timeout_s)
            async with session.post(cfg.endpoint_url, json=body, headers=_headers(cfg), timeout=timeout) as response:
                if not 200 <= response.status < 300:
                    text = await response.text()
                    raise BackendRefused(response.status, text[:200])
                try:
                    return await response.json(content_type=None), attempts
                except ValueError as e:
                    raise InvalidModelOutput(f"response body is not JSON: {e}") from e
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            if attempts > cfg.max_retries:
                raise TransportError(
                    f"Backend {cfg.endpoint_url} unreachable after {attempts} attempts: {e!r}"
                ) from e
            logger.warning("Transport error on attempt %d (%r); retrying in %.1fs", attempts, e, delay)
            await _sleep(delay)
            delay *= BACKOFF_FACTOR


def mock_fixed(payload: PromptPayload, cfg: BackendConfig) -> ModelPrediction:
    return ModelPrediction(cfg.mock_label, cfg.mock_probability, str(cfg.mock_label), SOURCE_ORACLE)


def mock_threshold(payload: PromptPayload, cfg: BackendConfig) -> ModelPrediction:
    """Label 1 when the configured feature, read back from the prompt, exceeds the threshold."""
    if payload.modality == MODALITY_AUDIO:
        raise InvalidModelOutput("mock_threshold needs a feature prompt, got an audio prompt")
    values = dict(parse_serialized(extract_serialized(payload)))
    if cfg.mock_feature not in values:
        raise InvalidModelOutput(f"feature {cfg.mock_feature!r} is not in the prompt")
    label = int(values[cfg.mock_feature] > cfg.mock_threshold)
    if cfg.mock_invert:
        label = 1 - label
    return ModelPrediction(label, cfg.mock_probability, str(label), SOURCE_ORACLE)


MOCKS: Dict[str, Callable[[PromptPayload, BackendConfig], ModelPrediction]] = {
    "mock_fixed": mock_fixed,
    "mock_threshold": mock_threshold,
}


async def predict_async(payload: PromptPayload, cfg: BackendConfig, session=None) -> BackendResponse:
    """
    One prediction for one prompt.

    Args:
        payload (PromptPayload): Feature or audio prompt.
        cfg (BackendConfig): Backend selection and wire settings.
        session (aiohttp.ClientSession, optional): Shared session; a private one is opened if omitted.

    Returns:
        BackendResponse: The prediction plus the raw response body.

    Raises:
        TransportError: If the endpoint stays unreachable after ``max_retries`` retries.
        BackendRefused: On a non-2xx status.
        InvalidModelOutput: If the response cannot be read as a label.
    """
    if not cfg.is_remote:
        return BackendResponse(MOCKS[cfg.kind](payload, cfg), None, 0)
    if cfg.kind == "remote_chat" and payload.modality == MODALITY_AUDIO:
        raise ConfigError("remote_chat backends take feature prompts; use remote_audio for audio")

    body = build_request(payload, cfg)
    own_session = session is None
    if own_session:
        session = aiohttp.ClientSession()
    try:
        raw, attempts = await _post_with_retries(session, body, cfg)
    finally:
        if own_session:
            await session.close()
    return BackendResponse(prediction_from_response(raw), raw, attempts)


def predict(payload: PromptPayload, cfg: BackendConfig) -> ModelPrediction:
    """Synchronous single prediction; mock kinds never touch the network."""
    if not cfg.is_remote:
        return MOCKS[cfg.kind](payload, cfg)
    return asyncio.run(predict_async(payload, cfg)).prediction


@dataclass
class BatchResult:
    """Per-payload outcome of predict_many: a response or the error it raised."""

    responses: List[Optional[BackendResponse]] = field(default_factory=list)
    errors: List[Optional[Exception]] = field(default_factory=list)


async def predict_many(payloads: Sequence[PromptPayload], cfg: BackendConfig,
                       session_factory: Callable = aiohttp.ClientSession) -> BatchResult:
    """
    Run many predictions with at most ``max_in_flight`` requests at once.

    Output position i always belongs to ``payloads[i]``. InvalidModelOutput
    is captured per payload; transport and refusal errors abort the batch.
    On abort the remaining requests are cancelled and awaited before the
    session closes, and the error carries its position as ``payload_index``.
    """
    semaphore = asyncio.Semaphore(cfg.max_in_flight)
    session = session_factory() if cfg.is_remote else None

    async def run_one(index, payload):
        async with semaphore:
            try:
                return await predict_async(payload, cfg, session), None
            except InvalidModelOutput as e:
                logger.warning("Invalid model output: %s", e)
                return None, e
            except BackendFailure as e:
                e.payload_index = index
                raise

    tasks = [asyncio.ensure_future(run_one(i, p)) for i, p in enumerate(payloads)]
    try:
        outcomes = await asyncio.gather(*tasks)
    except BaseException:
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise
    finally:
        if session is not None:
            await session.close()

    result = BatchResult()
    for response, error in outcomes:
        result.responses.append(response)
        result.errors.append(error)
    return result
