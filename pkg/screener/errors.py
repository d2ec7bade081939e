"""
Exception hierarchy for the screening harness.

Every error raised on purpose by the package derives from ScreenerError.
Three grouping bases map onto CLI exit codes: ValidationFailure (2),
BackendFailure (3) and EvaluationFailure (4).
"""

from typing import Iterable, Optional


class ScreenerError(Exception):
    """Root of all errors raised by the screener package."""


class ValidationFailure(ScreenerError):
    """Corpus, manifest or configuration problems found before processing."""


class BackendFailure(ScreenerError):
    """A model backend could not produce a usable prediction."""

    # position in the batch passed to predict_many, when known
    payload_index: Optional[int] = None


class EvaluationFailure(ScreenerError):
    """Subject-level metrics could not be computed."""


# corpus

class MalformedManifest(ValidationFailure, ValueError):
    pass


class DuplicateSubject(ValidationFailure, ValueError):
    pass


class UnknownLabel(ValidationFailure, ValueError):
    pass


class UnsupportedEncoding(ValidationFailure, ValueError):
    pass


class CorruptFile(ValidationFailure, ValueError):
    pass


class EmptyAudio(ValidationFailure, ValueError):
    pass


class ConfigError(ValidationFailure, ValueError):
    pass


# preprocess / features

class RecordingTooShort(ValidationFailure, ValueError):
    pass


class NoVoicedFrames(ScreenerError, ValueError):
    pass


class InsufficientPeriods(ScreenerError, ValueError):
    pass


class InsufficientCycles(ScreenerError, ValueError):
    pass


class NonpositiveAmplitude(ScreenerError, ValueError):
    pass


class ExtractionFailed(ScreenerError):
    pass


# prompting

class RegistryMismatch(ScreenerError, ValueError):
    pass


class MissingAudio(ValidationFailure, FileNotFoundError):
    pass


# backends

class TransportError(BackendFailure, ConnectionError):
    pass


class BackendRefused(BackendFailure):
    """Non-2xx response from a remote backend."""

    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(f"Backend refused request (Status: {status}){': ' + message if message else ''}")


class InvalidModelOutput(BackendFailure, ValueError):
    pass


class NonFiniteLogprob(BackendFailure, ValueError):
    pass


# aggregation / evaluation

class EmptyPredictionList(EvaluationFailure, ValueError):
    pass


class AllSegmentsInvalid(EvaluationFailure):
    pass


class SingleClassInput(EvaluationFailure, ValueError):
    pass


class StageError(ScreenerError):
    """
    A failure inside a pipeline stage.

    Carries the stage name and the identifiers of the offending
    recording or segment so the message points at the data.
    """

    def __init__(self, stage: str, cause: BaseException, identifiers: Optional[Iterable[str]] = None):
        self.stage = stage
        self.cause = cause
        self.identifiers = tuple(identifiers or ())
        where = f" [{', '.join(self.identifiers)}]" if self.identifiers else ""
        super().__init__(f"stage '{stage}'{where}: {cause}")
