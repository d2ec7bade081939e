"""
Prompt construction for the two input modalities.

Feature prompts embed a serialized ``name: value`` list into the text
template; audio prompts carry the fixed audio template plus a reference
to the preprocessed full recording.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import MissingAudio, RegistryMismatch
from .features import FeatureRegistry, FeatureVector
from .utils import sha256_text

MODALITY_FEATURES = "feature_text"
MODALITY_AUDIO = "audio"

LIST_PLACEHOLDER = "{list}"

FEATURE_TEMPLATE = (
    "Task: You are a clinical classification model. Based on the audio features extracted from a "
    "person's speech, classify whether a person has Parkinson's disease or not. Output 1 if the person "
    "has Parkinson's disease, or 0 if the person is healthy.\n"
    "Instruction: Respond with exactly one token: 0 or 1.\n"
    "Now solve the following.\n"
    "Input: {list}\n"
    "Output:"
)

AUDIO_TEMPLATE = (
    "You are an audio analysis model. Your task is to decide whether the speech characteristics are "
    "more consistent with healthy control speech or Parkinson's. Consider acoustic cues, including pitch "
    "variability, loudness variability over time, articulation precision of consonants, voice quality "
    "(breathy, hoarse, strained), speech rate, and rhythm. Make a balanced decision based only on the "
    "provided audio.\n"
    "Output only a single digit: 0 = Healthy or 1 = Parkinson's disease."
)

# sha256 of the templates above; a change in wording must update these
FEATURE_TEMPLATE_SHA256 = "03e1791d50bf0b897e18bf65a0ff84cd39437b8b83c69f572fa57f3fe1325a02"
AUDIO_TEMPLATE_SHA256 = "60debaa5c24d667fee0430557896d593bd1458abadf7a15355495010e00b0687"

FIXED_RANGE = (1e-4, 1e6)


@dataclass(frozen=True)
class PromptPayload:
    modality: str
    system_text: str
    user_text: str
    audio_ref: Optional[Path] = None

    def __post_init__(self):
        if self.modality not in (MODALITY_FEATURES, MODALITY_AUDIO):
            raise ValueError(f"unknown prompt modality {self.modality!r}")
        if (self.modality == MODALITY_AUDIO) != (self.audio_ref is not None):
            raise ValueError("audio_ref must be set exactly for audio prompts")

    @property
    def sha256(self) -> str:
        return sha256_text(self.system_text + "\n" + self.user_text)


def format_value(value: float, sig_digits: int = 6) -> str:
    """
    Render a number with ``sig_digits`` significant digits.

    Positional notation for magnitudes in [1e-4, 1e6) and for zero,
    scientific notation with a compact exponent otherwise. Trailing zeros
    and a dangling decimal point are trimmed.

    >>> format_value(0.007)
    '0.007'
    >>> format_value(0.000012345678)
    '1.23457e-5'
    """
    if sig_digits < 1:
        raise ValueError(f"sig_digits must be at least 1, got {sig_digits}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"cannot serialize non-finite value {value}")
    if value == 0.0:
        return "0"

    magnitude = abs(value)
    if FIXED_RANGE[0] <= magnitude < FIXED_RANGE[1]:
        text = np.format_float_positional(value, precision=sig_digits, unique=False, fractional=False, trim="-")
        # rounding up may reach the scientific range (999999.7 -> 1000000)
        if abs(float(text)) < FIXED_RANGE[1]:
            return text
    return np.format_float_scientific(value, precision=sig_digits - 1, unique=False, trim="-", exp_digits=1)


def serialize_features(fv: FeatureVector, registry: FeatureRegistry, sig_digits: int = 6) -> str:
    """
    Serialize a feature vector as ``name: value`` pairs joined by ", ".

    Args:
        fv (FeatureVector): Vector aligned to ``registry``.
        registry (FeatureRegistry): Names and order of the features.
        sig_digits (int, optional): Significant digits per value. Defaults to 6.

    Returns:
        str: The serialized list, in registry order.

    Raises:
        RegistryMismatch: If the vector's length or registry version differs from the registry.
    """
    if len(fv.values) != len(registry):
        raise RegistryMismatch(f"vector has {len(fv.values)} values, registry {registry.version!r} has {len(registry)}")
    if fv.registry_version != registry.version:
        raise RegistryMismatch(f"vector built with registry {fv.registry_version!r}, not {registry.version!r}")
    return ", ".join(f"{name}: {format_value(v, sig_digits)}" for name, v in zip(registry.names, fv.values))


def parse_serialized(serialized: str) -> List[Tuple[str, float]]:
    """Inverse of serialize_features, up to rounding."""
    pairs = []
    for item in serialized.split(", "):
        name, sep, raw = item.partition(": ")
        if not sep or not name:
            raise ValueError(f"not a 'name: value' pair: {item!r}")
        pairs.append((name, float(raw)))
    return pairs


_INPUT_LINE = re.compile(r"^Input: (.*)$", re.MULTILINE)


def extract_serialized(payload: PromptPayload) -> str:
    """Return the serialized feature list embedded in a feature prompt."""
    if payload.modality != MODALITY_FEATURES:
        raise ValueError("only feature prompts embed a feature list")
    match = _INPUT_LINE.search(payload.user_text)
    if match is None:
        raise ValueError("feature prompt has no 'Input:' line")
    return match.group(1)


def build_feature_prompt(serialized: str) -> PromptPayload:
    """Fill the text template with a serialized feature list; the template sits in user_text."""
    if not serialized:
        raise ValueError("serialized feature list must not be empty")
    return PromptPayload(
        modality=MODALITY_FEATURES,
        system_text="",
        user_text=FEATURE_TEMPLATE.replace(LIST_PLACEHOLDER, serialized),
    )


def build_audio_prompt(recording_audio_path) -> PromptPayload:
    """
    Build the audio prompt for one preprocessed recording.

    Raises:
        MissingAudio: If the referenced file does not exist.
    """
    path = Path(recording_audio_path)
    if not path.is_file():
        raise MissingAudio(f"Preprocessed recording not found: {path}")
    return PromptPayload(modality=MODALITY_AUDIO, system_text="", user_text=AUDIO_TEMPLATE, audio_ref=path)
