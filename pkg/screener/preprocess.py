"""
Standardized acoustic pipeline: noise attenuation at the native rate,
resampling to the target rate, then non-overlapping fixed-length segmentation.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from typing import List, Tuple

import numpy as np
from scipy import ndimage, signal

from .corpus import MIN_USABLE_DURATION_S, AudioBuffer
from .errors import ConfigError, RecordingTooShort

logger = logging.getLogger(__name__)

# Spectral gating
GATE_FRAME_S = 0.032
GATE_HOP_S = 0.016
GATE_STD_FACTOR = 1.5
NOISE_SMOOTHING_HZ = 1000.0
MAGNITUDE_FLOOR = 1e-10

# Resampler
KAISER_BETA = 12.0
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate_hz: int = 16000
    segment_seconds: float = 10.0
    denoise_enabled: bool = True
    denoise_reduction_db: float = 12.0
    noise_percentile: float = 0.10

    def __post_init__(self):
        if self.target_rate_hz <= 0:
            raise ConfigError(f"target_rate_hz must be positive, got {self.target_rate_hz}")
        if self.segment_seconds <= 0:
            raise ConfigError(f"segment_seconds must be positive, got {self.segment_seconds}")
        if not 0.0 < self.noise_percentile < 1.0:
            raise ConfigError(f"noise_percentile must lie in (0, 1), got {self.noise_percentile}")
        if self.denoise_reduction_db < 0:
            raise ConfigError(f"denoise_reduction_db must be non-negative, got {self.denoise_reduction_db}")


@dataclass(frozen=True, eq=False)
class SegmentAudio(AudioBuffer):
    """A fixed-length slice of a preprocessed recording."""

    recording_ref: Tuple[str, str]
    segment_index: int

    @property
    def segment_ref(self) -> Tuple[str, str, int]:
        return (self.recording_ref[0], self.recording_ref[1], self.segment_index)


def denoise(audio: AudioBuffer, cfg: PreprocessConfig) -> AudioBuffer:
    """
    Attenuate stationary background noise by spectral gating.

    A noise profile (mean and standard deviation of the dB magnitude per
    frequency bin) is estimated from the quietest ``noise_percentile`` of
    STFT frames and median-smoothed across frequency so that narrowband
    partials do not enter it. Bins below ``profile mean + 1.5 std`` are
    attenuated by ``denoise_reduction_db``; the signal is rebuilt by
    overlap-add. Output length and rate equal the input's.

    Args:
        audio (AudioBuffer): Input at its native rate.
        cfg (PreprocessConfig): Gating parameters.

    Returns:
        AudioBuffer: The gated signal, or ``audio`` itself when denoising is disabled.
    """
    if not cfg.denoise_enabled:
        return audio

    x = audio.samples
    sr = audio.sample_rate_hz
    if not np.any(x):
        return AudioBuffer(np.zeros_like(x), sr)

    nperseg = max(8, int(round(GATE_FRAME_S * sr)))
    hop = max(1, int(round(GATE_HOP_S * sr)))
    noverlap = nperseg - hop

    _, _, spec = signal.stft(x, fs=sr, window="hann", nperseg=nperseg, noverlap=noverlap,
                             boundary="zeros", padded=True)
    magnitude = np.abs(spec)
    magnitude_db = 20.0 * np.log10(np.maximum(magnitude, MAGNITUDE_FLOOR))

    frame_energy = np.sum(magnitude ** 2, axis=0)
    n_frames = frame_energy.size
    n_noise = max(1, int(np.ceil(cfg.noise_percentile * n_frames)))
    quiet = np.argsort(frame_energy, kind="stable")[:n_noise]

    noise_db = magnitude_db[:, quiet]
    width_bins = max(1, int(round(NOISE_SMOOTHING_HZ / (sr / nperseg))))
    profile_mean = ndimage.median_filter(noise_db.mean(axis=1), size=width_bins, mode="nearest")
    profile_std = ndimage.median_filter(noise_db.std(axis=1), size=width_bins, mode="nearest")
    threshold_db = profile_mean + GATE_STD_FACTOR * profile_std

    attenuation = 10.0 ** (-cfg.denoise_reduction_db / 20.0)
    gain = np.where(magnitude_db < threshold_db[:, None], attenuation, 1.0)

    _, y = signal.istft(spec * gain, fs=sr, window="hann", nperseg=nperseg, noverlap=noverlap,
                        boundary=True)
    y = np.real(y)
    if y.size < x.size:
        y = np.pad(y, (0, x.size - y.size))
    return AudioBuffer(y[: x.size], sr)


@lru_cache(maxsize=32)
def _kaiser_lowpass(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    taps = signal.firwin(TAPS_PER_PHASE * max_rate + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    taps.setflags(write=False)
    return taps


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """
    Band-limited polyphase resampling with a Kaiser-windowed sinc filter
    (beta 12, 64 taps per polyphase branch).

    Input already at the target rate is returned unchanged.
    """
    if target_rate_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate_hz}")
    source = audio.sample_rate_hz
    if source == target_rate_hz:
        return audio

    g = gcd(source, target_rate_hz)
    up, down = target_rate_hz // g, source // g
    y = signal.resample_poly(audio.samples, up, down, window=_kaiser_lowpass(up, down))
    return AudioBuffer(y, target_rate_hz)


def segment(audio: AudioBuffer, cfg: PreprocessConfig, recording_ref: Tuple[str, str] = ("", "")) -> List[SegmentAudio]:
    """
    Split a recording into consecutive, disjoint windows of ``segment_seconds``.

    A trailing remainder shorter than one window is dropped, except when
    the whole recording is shorter than one window: then the full recording
    becomes the single segment.

    Raises:
        RecordingTooShort: If the recording lasts less than 1.0 s.
    """
    if audio.sample_rate_hz != cfg.target_rate_hz:
        raise ValueError(
            f"segment expects audio at {cfg.target_rate_hz} Hz, got {audio.sample_rate_hz} Hz"
        )

    sr = audio.sample_rate_hz
    n = len(audio)
    min_samples = int(round(MIN_USABLE_DURATION_S * sr))
    if n < min_samples:
        raise RecordingTooShort(
            f"recording {'/'.join(recording_ref)} lasts {n / sr:.3f}s, below {MIN_USABLE_DURATION_S:.1f}s"
        )

    window = int(round(cfg.segment_seconds * sr))
    if n < window:
        return [SegmentAudio(audio.samples, sr, recording_ref, 0)]

    return [
        SegmentAudio(audio.samples[i * window:(i + 1) * window], sr, recording_ref, i)
        for i in range(n // window)
    ]


def preprocess_recording(audio: AudioBuffer, cfg: PreprocessConfig) -> AudioBuffer:
    """Denoise at the native rate, then resample to the target rate."""
    return resample(denoise(audio, cfg), cfg.target_rate_hz)
