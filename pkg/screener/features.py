"""
Handcrafted acoustic features for one speech segment.

Feature values are produced in the fixed order of a versioned registry
(``registry_v1.txt``). Perturbation measures follow the classical
definitions over consecutive glottal cycles, with T(i) the cycle periods
and A(i) the cycle peak amplitudes of one voiced run:

    jitter_local     mean |T(i) - T(i-1)| / mean T
    jitter_absolute  mean |T(i) - T(i-1)|                 (seconds)
    jitter_rap       mean |T(i) - avg3(T, i)| / mean T
    jitter_ppq5      mean |T(i) - avg5(T, i)| / mean T
    jitter_ddp       mean |(T(i+1) - T(i)) - (T(i) - T(i-1))| / mean T
    shimmer_local    mean |A(i) - A(i-1)| / mean A
    shimmer_db       mean |20 log10(A(i) / A(i-1))|
    shimmer_apqK     mean |A(i) - avgK(A, i)| / mean A     (K = 3, 5, 11)
    shimmer_dda      mean |(A(i+1) - A(i)) - (A(i) - A(i-1))| / mean A

avgK is the centred K-point moving average. Differences are only taken
between cycles of the same voiced run; means pool all runs of a segment.

Pitch-dependent features of an unvoiced segment, and any non-finite
value, are imputed to 0 and listed in ``FeatureVector.imputed``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import librosa
import numpy as np
from scipy.fft import dct

from .corpus import MIN_USABLE_DURATION_S
from .errors import (
    ExtractionFailed,
    InsufficientCycles,
    InsufficientPeriods,
    NonpositiveAmplitude,
    NoVoicedFrames,
    RecordingTooShort,
    RegistryMismatch,
)
from .preprocess import SegmentAudio
from .utils import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

REGISTRY_FILE = Path(__file__).with_name("registry_v1.txt")
CANONICAL_SIZE = 71

# Pitch tracking
PITCH_FRAME_S = 0.040
PITCH_HOP_S = 0.010
F0_MIN_HZ = 60.0
F0_MAX_HZ = 400.0
VOICING_THRESHOLD = 0.45
# smallest-lag peak within this fraction of the best peak wins (octave guard)
PEAK_RATIO = 0.9
CYCLE_SEARCH = 0.2

# Short-time spectra
FRAME_S = 0.025
HOP_S = 0.010
N_MEL_FILTERS = 26
N_MFCC = 13
N_LOGMEL_BANDS = 13
MEL_FMAX_HZ = 8000.0
LOG_FLOOR = 1e-10
ROLLOFF = 0.85

HNR_MIN_DB = -20.0
HNR_MAX_DB = 40.0

PAUSE_RELATIVE_DB = 30.0
MIN_PAUSE_S = 0.15

PITCH_DEPENDENT_GROUPS = ("jitter", "shimmer", "hnr", "f0")


@dataclass(frozen=True)
class FeatureEntry:
    name: str
    extractor: str
    unit: str


@dataclass(frozen=True)
class FeatureRegistry:
    """Ordered, versioned list of feature names."""

    entries: Tuple[FeatureEntry, ...]
    version: str

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("feature registry names must be unique")
        if not names:
            raise ValueError("feature registry must not be empty")

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, path: Path = REGISTRY_FILE, size: Optional[int] = None, version: Optional[str] = None) -> "FeatureRegistry":
        """Read a registry text file, optionally keeping only its first ``size`` entries."""
        entries = []
        file_version = None
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    if "version" in line and file_version is None:
                        file_version = line.rsplit("version", 1)[1].strip(" .")
                    continue
                if not line.strip():
                    continue
                name, extractor, unit = line.split("\t")
                entries.append(FeatureEntry(name, extractor, unit))
        if size is not None:
            entries = entries[:size]
        return cls(entries=tuple(entries), version=version or file_version or "unversioned")

    @classmethod
    def canonical(cls) -> "FeatureRegistry":
        return cls.load(size=CANONICAL_SIZE, version="v1")

    @classmethod
    def extended(cls) -> "FeatureRegistry":
        return cls.load(version="v1-76")

    @classmethod
    def for_version(cls, version: str) -> "FeatureRegistry":
        if version == "v1":
            return cls.canonical()
        if version == "v1-76":
            return cls.extended()
        raise ValueError(f"unknown registry version {version!r}")

    @classmethod
    def from_names(cls, names: Sequence[str], version: str) -> "FeatureRegistry":
        return cls(entries=tuple(FeatureEntry(n, "custom", "") for n in names), version=version)


@dataclass(frozen=True)
class FeatureVector:
    values: Tuple[float, ...]
    segment_ref: Tuple[str, str, int]
    registry_version: str
    imputed: Tuple[str, ...] = ()

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not all(np.isfinite(values)):
            raise ValueError("feature vectors hold finite values only")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segment_ref", (str(self.segment_ref[0]), str(self.segment_ref[1]), int(self.segment_ref[2])))
        object.__setattr__(self, "imputed", tuple(self.imputed))

    def as_dict(self, registry: FeatureRegistry) -> Dict[str, float]:
        if len(registry) != len(self.values) or registry.version != self.registry_version:
            raise RegistryMismatch(
                f"vector has {len(self.values)} values for registry {self.registry_version!r}, "
                f"registry {registry.version!r} has {len(registry)} entries"
            )
        return dict(zip(registry.names, self.values))


@dataclass(frozen=True, eq=False)
class PitchTrack:
    """
    Frame-level F0 plus the glottal cycles found inside voiced runs.

    ``f0_hz`` is 0 on unvoiced frames and ``peak_lags`` is -1 there.
    """

    f0_hz: np.ndarray
    voiced_flags: np.ndarray
    peak_lags: np.ndarray
    period_runs: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    amplitude_runs: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    frame_length: int = 0
    hop_length: int = 0

    @property
    def voiced_fraction(self) -> float:
        return float(np.mean(self.voiced_flags)) if self.voiced_flags.size else 0.0


# ---------------------------------------------------------------------------
# framing and autocorrelation
# ---------------------------------------------------------------------------

def frame_signal(x: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """Frames starting at 0, hop, 2*hop, ...; an incomplete last frame is dropped."""
    if x.size < frame_length:
        return np.empty((0, frame_length))
    return librosa.util.frame(np.ascontiguousarray(x), frame_length=frame_length, hop_length=hop_length, axis=0)


def normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """
    Normalized autocorrelation r(lag) for lags 0..max_lag-1 of every frame:

        r(lag) = sum x[n] x[n+lag] / sqrt(sum x[n]^2 * sum x[n+lag]^2)

    with both sums over the overlapping part of the frame.
    """
    n = frames.shape[1]
    spectrum = np.fft.rfft(frames, 2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, 2 * n, axis=1)[:, :max_lag]

    energy = np.cumsum(frames ** 2, axis=1)
    total = energy[:, -1:]
    lags = np.arange(max_lag)
    head = energy[:, n - 1 - lags]
    before = np.concatenate([np.zeros((frames.shape[0], 1)), energy[:, : max_lag - 1]], axis=1)
    tail = total - before
    denom = np.sqrt(np.maximum(head * tail, 0.0))

    r = np.zeros_like(acf)
    valid = denom > 1e-10 * np.maximum(total, np.finfo(float).tiny)
    np.divide(acf, denom, out=r, where=valid)
    return np.clip(r, -1.0, 1.0)


def _parabolic(y0: float, y1: float, y2: float) -> Tuple[float, float]:
    """Vertex offset in (-0.5, 0.5) and height of the parabola through three points."""
    curvature = y0 - 2.0 * y1 + y2
    if curvature >= 0:
        return 0.0, y1
    offset = 0.5 * (y0 - y2) / curvature
    offset = float(np.clip(offset, -0.5, 0.5))
    return offset, y1 - 0.25 * (y0 - y2) * offset


def _pitch_geometry(sr: int) -> Tuple[int, int, int, int]:
    frame_length = int(round(PITCH_FRAME_S * sr))
    hop_length = int(round(PITCH_HOP_S * sr))
    lag_min = int(np.ceil(sr / F0_MAX_HZ))
    lag_max = min(int(np.floor(sr / F0_MIN_HZ)), frame_length - 2)
    return frame_length, hop_length, lag_min, lag_max


def _pick_peak(r: np.ndarray, lag_min: int, lag_max: int) -> Optional[int]:
    interior = np.arange(max(lag_min, 1), lag_max)
    if interior.size == 0:
        return None
    mid = r[interior]
    is_peak = (mid >= r[interior - 1]) & (mid > r[interior + 1])
    peaks = interior[is_peak]
    if peaks.size == 0:
        return None
    best = r[peaks].max()
    if best <= 0:
        return None
    return int(peaks[r[peaks] >= PEAK_RATIO * best][0])


def _mark_cycles(x: np.ndarray, sr: int, f0: np.ndarray, first: int, last: int,
                 frame_length: int, hop_length: int) -> Tuple[np.ndarray, np.ndarray]:
    """Track positive cycle peaks through one voiced run of frames [first, last]."""
    start = first * hop_length
    stop = min(x.size, last * hop_length + frame_length)

    def period_at(pos: float) -> float:
        k = int(round((pos - frame_length / 2) / hop_length))
        return sr / f0[min(max(k, first), last)]

    positions: List[float] = []
    amplitudes: List[float] = []

    p = start + int(np.argmax(x[start:min(stop, start + int(np.ceil(period_at(start))))]))
    while True:
        if 0 < p < x.size - 1:
            offset, height = _parabolic(x[p - 1], x[p], x[p + 1])
        else:
            offset, height = 0.0, x[p]
        positions.append(p + offset)
        amplitudes.append(height)

        period = period_at(p)
        lo = p + int(np.floor((1.0 - CYCLE_SEARCH) * period))
        hi = p + int(np.ceil((1.0 + CYCLE_SEARCH) * period)) + 1
        if hi > stop:
            break
        p = lo + int(np.argmax(x[lo:hi]))

    periods = np.diff(np.asarray(positions)) / sr
    return periods, np.asarray(amplitudes)


def track_pitch(segment: SegmentAudio) -> PitchTrack:
    """
    Autocorrelation pitch tracker.

    Frames of 40 ms every 10 ms; the F0 search covers 60-400 Hz. Each
    frame's pitch lag is the shortest-lag autocorrelation peak within 90 %
    of the strongest one, refined by parabolic interpolation; frames whose
    interpolated peak falls below 0.45 are unvoiced. Glottal cycles are
    then marked inside every run of voiced frames.

    Args:
        segment (SegmentAudio): Preprocessed segment of at least 1.0 s.

    Returns:
        PitchTrack: Per-frame F0 and voicing, plus per-run cycle periods and peak amplitudes.

    Raises:
        RecordingTooShort: If the segment is shorter than 1.0 s.
        NoVoicedFrames: If no frame is voiced.
    """
    sr = segment.sample_rate_hz
    if len(segment) < int(round(MIN_USABLE_DURATION_S * sr)):
        raise RecordingTooShort(f"pitch tracking needs {MIN_USABLE_DURATION_S:.1f}s, got {segment.duration_s:.3f}s")

    x = segment.samples
    frame_length, hop_length, lag_min, lag_max = _pitch_geometry(sr)
    frames = frame_signal(x, frame_length, hop_length)
    r = normalized_autocorrelation(frames, lag_max + 1)

    n_frames = frames.shape[0]
    f0 = np.zeros(n_frames)
    lags = np.full(n_frames, -1, dtype=int)
    for i in range(n_frames):
        lag = _pick_peak(r[i], lag_min, lag_max)
        if lag is None:
            continue
        offset, height = _parabolic(r[i, lag - 1], r[i, lag], r[i, lag + 1])
        if height < VOICING_THRESHOLD:
            continue
        f0[i] = float(np.clip(sr / (lag + offset), F0_MIN_HZ, F0_MAX_HZ))
        lags[i] = lag

    voiced = lags >= 0
    if not voiced.any():
        raise NoVoicedFrames(f"segment {segment.segment_ref} has no voiced frames")

    period_runs, amplitude_runs = [], []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], voiced.astype(int), [0]])))
    for first, stop in zip(edges[::2], edges[1::2]):
        periods, amplitudes = _mark_cycles(x, sr, f0, first, stop - 1, frame_length, hop_length)
        period_runs.append(periods)
        amplitude_runs.append(amplitudes)

    for arr in (f0, voiced, lags):
        arr.setflags(write=False)
    return PitchTrack(f0_hz=f0, voiced_flags=voiced, peak_lags=lags,
                      period_runs=tuple(period_runs), amplitude_runs=tuple(amplitude_runs),
                      frame_length=frame_length, hop_length=hop_length)


# ---------------------------------------------------------------------------
# perturbation measures
# ---------------------------------------------------------------------------

def _as_runs(values) -> List[np.ndarray]:
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], np.ndarray):
        return [np.asarray(v, dtype=float) for v in values]
    return [np.asarray(values, dtype=float)]


def _perturbation(runs: List[np.ndarray], points: int, error) -> float:
    """Mean absolute deviation from the centred moving average, over the pooled mean."""
    deviations = []
    for run in runs:
        if points == 1:
            if run.size >= 2:
                deviations.append(np.abs(np.diff(run)))
        elif run.size >= points:
            half = points // 2
            average = np.convolve(run, np.ones(points) / points, mode="valid")
            deviations.append(np.abs(run[half:run.size - half] - average))
    if not deviations:
        need = 2 if points == 1 else points
        raise error(f"need at least {need} consecutive values, got runs of {[r.size for r in runs]}")
    return float(np.mean(np.concatenate(deviations)) / np.mean(np.concatenate(runs)))


def _difference_of_differences(runs: List[np.ndarray], error) -> float:
    deviations = [np.abs(np.diff(run, n=2)) for run in runs if run.size >= 3]
    if not deviations:
        raise error("need at least 3 consecutive values")
    return float(np.mean(np.concatenate(deviations)) / np.mean(np.concatenate(runs)))


def _check_periods(periods) -> List[np.ndarray]:
    runs = _as_runs(periods)
    if sum(r.size for r in runs) < 2:
        raise InsufficientPeriods("jitter needs at least 2 periods")
    return runs


def _check_amplitudes(amplitudes) -> List[np.ndarray]:
    runs = _as_runs(amplitudes)
    if sum(r.size for r in runs) < 2:
        raise InsufficientCycles("shimmer needs at least 2 cycles")
    if any(np.any(r <= 0) for r in runs):
        raise NonpositiveAmplitude("cycle peak amplitudes must be positive")
    return runs


def jitter_local(periods_s) -> float:
    """
    Mean absolute difference of consecutive periods divided by the mean period.

    Raises:
        InsufficientPeriods: With fewer than two periods.
    """
    return _perturbation(_check_periods(periods_s), 1, InsufficientPeriods)


def jitter_absolute(periods_s) -> float:
    runs = _check_periods(periods_s)
    return jitter_local(runs) * float(np.mean(np.concatenate(runs)))


def jitter_rap(periods_s) -> float:
    return _perturbation(_check_periods(periods_s), 3, InsufficientPeriods)


def jitter_ppq5(periods_s) -> float:
    return _perturbation(_check_periods(periods_s), 5, InsufficientPeriods)


def jitter_ddp(periods_s) -> float:
    return _difference_of_differences(_check_periods(periods_s), InsufficientPeriods)


def shimmer_local(peak_amplitudes) -> float:
    """
    Mean absolute difference of consecutive cycle peak amplitudes divided by
    the mean amplitude.

    Raises:
        InsufficientCycles: With fewer than two amplitudes.
        NonpositiveAmplitude: If any amplitude is zero or negative.
    """
    return _perturbation(_check_amplitudes(peak_amplitudes), 1, InsufficientCycles)


def shimmer_db(peak_amplitudes) -> float:
    runs = _check_amplitudes(peak_amplitudes)
    ratios = [np.abs(20.0 * np.log10(r[1:] / r[:-1])) for r in runs if r.size >= 2]
    if not ratios:
        raise InsufficientCycles("shimmer needs 2 consecutive cycles")
    return float(np.mean(np.concatenate(ratios)))


def shimmer_apq(peak_amplitudes, points: int) -> float:
    return _perturbation(_check_amplitudes(peak_amplitudes), points, InsufficientCycles)


def shimmer_dda(peak_amplitudes) -> float:
    return _difference_of_differences(_check_amplitudes(peak_amplitudes), InsufficientCycles)


def _hnr_values(segment: SegmentAudio, track: PitchTrack) -> np.ndarray:
    voiced = np.flatnonzero(track.voiced_flags)
    if voiced.size == 0:
        raise NoVoicedFrames("HNR needs at least one voiced frame")
    frames = frame_signal(segment.samples, track.frame_length, track.hop_length)[voiced]
    lags = track.peak_lags[voiced]
    r = normalized_autocorrelation(frames, int(lags.max()) + 2)

    values = np.empty(voiced.size)
    for i, lag in enumerate(lags):
        _, height = _parabolic(r[i, lag - 1], r[i, lag], r[i, lag + 1])
        height = min(height, 1.0)
        if height >= 1.0:
            values[i] = HNR_MAX_DB
        elif height <= 0.0:
            values[i] = HNR_MIN_DB
        else:
            values[i] = np.clip(10.0 * np.log10(height / (1.0 - height)), HNR_MIN_DB, HNR_MAX_DB)
    return values


def hnr_db(segment: SegmentAudio, track: PitchTrack) -> float:
    """
    Mean harmonic-to-noise ratio over voiced frames, in dB.

    Per frame, HNR = 10 log10(r / (1 - r)) with r the normalized
    autocorrelation at the pitch lag, clamped to [-20, 40] dB.
    """
    return float(np.mean(_hnr_values(segment, track)))


# ---------------------------------------------------------------------------
# short-time spectra
# ---------------------------------------------------------------------------

def mel_filterbank(n_filters: int, n_fft: int, sr: int, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular HTK-mel filters with unit peaks, shape (n_filters, n_fft//2 + 1)."""
    fmax = min(fmax or sr / 2.0, sr / 2.0)
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_filters, fmin=fmin, fmax=fmax,
                               htk=True, norm=None, dtype=np.float64)


def _spectral_geometry(sr: int) -> Tuple[int, int, int]:
    frame_length = int(round(FRAME_S * sr))
    hop_length = int(round(HOP_S * sr))
    n_fft = 1 << (frame_length - 1).bit_length()
    return frame_length, hop_length, n_fft


def centered_offset(n_samples: int, frame_length: int, hop_length: int) -> int:
    """
    First sample of the spectral frame grid. The samples left over by the
    hop grid are split between both ends, so a reversed segment is framed
    at mirrored positions whenever the leftover is even.
    """
    if n_samples < frame_length:
        return 0
    return ((n_samples - frame_length) % hop_length) // 2


def _spectral_samples(samples: np.ndarray, sr: int) -> np.ndarray:
    frame_length, hop_length, _ = _spectral_geometry(sr)
    return samples[centered_offset(samples.size, frame_length, hop_length):]


def power_spectrogram(samples: np.ndarray, sr: int) -> np.ndarray:
    """|DFT|^2 of Hann-windowed 25 ms frames every 10 ms, shape (frames, n_fft//2 + 1)."""
    frame_length, hop_length, n_fft = _spectral_geometry(sr)
    frames = frame_signal(_spectral_samples(samples, sr), frame_length, hop_length) * np.hanning(frame_length)
    return np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2


def mfcc_frames(samples: np.ndarray, sr: int, n_coeffs: int = N_MFCC) -> np.ndarray:
    """MFCCs 1..n_coeffs per frame: orthonormal DCT-II of log mel energies (26 filters, 0-8 kHz)."""
    _, _, n_fft = _spectral_geometry(sr)
    fbank = mel_filterbank(N_MEL_FILTERS, n_fft, sr, 0.0, MEL_FMAX_HZ)
    energies = power_spectrogram(samples, sr) @ fbank.T
    log_energies = np.log(np.maximum(energies, LOG_FLOOR))
    return dct(log_energies, type=2, norm="ortho", axis=1)[:, 1:n_coeffs + 1]


def mfcc_stats(segment: SegmentAudio, n_coeffs: int = N_MFCC) -> Tuple[np.ndarray, np.ndarray]:
    """Per-coefficient mean and standard deviation of MFCCs 1..n_coeffs across frames."""
    coeffs = mfcc_frames(segment.samples, segment.sample_rate_hz, n_coeffs)
    # deviations from the first frame are exactly 0 for identical frames
    return coeffs.mean(axis=0), (coeffs - coeffs[:1]).std(axis=0)


def _nan_stats(values: np.ndarray) -> Tuple[float, float]:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


def _spectral_features(power: np.ndarray, sr: int) -> Dict[str, float]:
    n_fft = 2 * (power.shape[1] - 1)
    # librosa expects (bins, frames)
    magnitude = np.sqrt(power).T
    silent = power.sum(axis=1) <= 0

    centroid = librosa.feature.spectral_centroid(S=magnitude, sr=sr, n_fft=n_fft)[0]
    bandwidth = librosa.feature.spectral_bandwidth(S=magnitude, sr=sr, n_fft=n_fft, p=2)[0]
    rolloff = librosa.feature.spectral_rolloff(S=power.T, sr=sr, n_fft=n_fft, roll_percent=ROLLOFF)[0]
    flatness = librosa.feature.spectral_flatness(S=magnitude, power=2.0, amin=LOG_FLOOR)[0]
    normalized = librosa.util.normalize(magnitude, norm=1, axis=0)
    flux = np.linalg.norm(np.diff(normalized, axis=1), axis=0)

    for arr in (centroid, bandwidth, rolloff, flatness):
        arr[silent] = np.nan
    flux[silent[1:] | silent[:-1]] = np.nan

    out = {}
    for name, arr in (("spectral_centroid", centroid), ("spectral_bandwidth", bandwidth),
                      ("spectral_rolloff", rolloff), ("spectral_flatness", flatness),
                      ("spectral_flux", flux)):
        out[f"{name}_mean"], out[f"{name}_std"] = _nan_stats(arr)
    return out


def _frame_rms_db(samples: np.ndarray, sr: int) -> np.ndarray:
    frame_length, hop_length, _ = _spectral_geometry(sr)
    rms = librosa.feature.rms(y=_spectral_samples(samples, sr), frame_length=frame_length,
                              hop_length=hop_length, center=False)[0]
    return librosa.amplitude_to_db(rms, ref=1.0, amin=LOG_FLOOR, top_db=None)


def _energy_features(samples: np.ndarray, sr: int) -> Dict[str, float]:
    frame_length, hop_length, _ = _spectral_geometry(sr)
    zcr = librosa.feature.zero_crossing_rate(_spectral_samples(samples, sr), frame_length=frame_length,
                                             hop_length=hop_length, center=False)[0]
    rms_db = _frame_rms_db(samples, sr)
    return {
        "zcr_mean": float(zcr.mean()),
        "zcr_std": float(zcr.std()),
        "rms_db_mean": float(rms_db.mean()),
        "rms_db_std": float(rms_db.std()),
        "intensity_range_db": float(np.percentile(rms_db, 95) - np.percentile(rms_db, 5)),
    }


def _pause_features(samples: np.ndarray, sr: int) -> Dict[str, float]:
    """Pauses are runs of at least 150 ms whose frame level sits 30 dB under the loudest frame."""
    rms_db = _frame_rms_db(samples, sr)
    quiet = rms_db < rms_db.max() - PAUSE_RELATIVE_DB
    edges = np.flatnonzero(np.diff(np.concatenate([[0], quiet.astype(int), [0]])))
    lengths = edges[1::2] - edges[::2]
    min_frames = int(round(MIN_PAUSE_S / HOP_S))
    pauses = lengths[lengths >= min_frames]

    duration_s = samples.size / sr
    pause_frames = int(pauses.sum())
    speech_frames = rms_db.size - pause_frames
    return {
        "pause_rate": pauses.size / duration_s,
        "mean_pause_duration": float(pauses.mean() * HOP_S) if pauses.size else 0.0,
        "speech_to_pause_ratio": speech_frames / pause_frames if pause_frames else float("nan"),
    }


def _logmel_features(power: np.ndarray, sr: int) -> Dict[str, float]:
    n_fft = 2 * (power.shape[1] - 1)
    bands = librosa.feature.melspectrogram(S=power.T, sr=sr, n_fft=n_fft, n_mels=N_LOGMEL_BANDS, fmin=0.0,
                                           fmax=MEL_FMAX_HZ, htk=True, norm=None, dtype=np.float64)
    band_db = librosa.power_to_db(bands, ref=1.0, amin=LOG_FLOOR, top_db=None)
    means = band_db.mean(axis=1)
    return {f"logmel_{i + 1}_mean": float(v) for i, v in enumerate(means)}


def _pitch_features(segment: SegmentAudio, track: PitchTrack) -> Dict[str, float]:
    out: Dict[str, float] = {}
    periods = list(track.period_runs)
    amplitudes = list(track.amplitude_runs)

    measures = {
        "jitter_local": lambda: jitter_local(periods),
        "jitter_absolute": lambda: jitter_absolute(periods),
        "jitter_rap": lambda: jitter_rap(periods),
        "jitter_ppq5": lambda: jitter_ppq5(periods),
        "jitter_ddp": lambda: jitter_ddp(periods),
        "shimmer_local": lambda: shimmer_local(amplitudes),
        "shimmer_db": lambda: shimmer_db(amplitudes),
        "shimmer_apq3": lambda: shimmer_apq(amplitudes, 3),
        "shimmer_apq5": lambda: shimmer_apq(amplitudes, 5),
        "shimmer_apq11": lambda: shimmer_apq(amplitudes, 11),
        "shimmer_dda": lambda: shimmer_dda(amplitudes),
    }
    for name, measure in measures.items():
        try:
            out[name] = measure()
        except (InsufficientPeriods, InsufficientCycles, NonpositiveAmplitude) as e:
            logger.debug("%s unavailable for %s: %s", name, segment.segment_ref, e)
            out[name] = float("nan")

    hnr = _hnr_values(segment, track)
    out["hnr_mean"], out["hnr_std"] = float(hnr.mean()), float(hnr.std())

    f0 = track.f0_hz[track.voiced_flags]
    out.update({
        "f0_mean": float(f0.mean()),
        "f0_std": float(f0.std()),
        "f0_min": float(f0.min()),
        "f0_max": float(f0.max()),
        "f0_median": float(np.median(f0)),
    })
    return out


def _candidate_values(segment: SegmentAudio, needed_groups: set) -> Dict[str, float]:
    x = segment.samples
    sr = segment.sample_rate_hz
    values: Dict[str, float] = {}

    if needed_groups & {"mfcc", "spectral", "flux", "logmel"}:
        power = power_spectrogram(x, sr)
        if "mfcc" in needed_groups:
            means, stds = mfcc_stats(segment)
            values.update({f"mfcc_{i + 1}_mean": float(v) for i, v in enumerate(means)})
            values.update({f"mfcc_{i + 1}_std": float(v) for i, v in enumerate(stds)})
        if needed_groups & {"spectral", "flux"}:
            values.update(_spectral_features(power, sr))
        if "logmel" in needed_groups:
            values.update(_logmel_features(power, sr))

    if "energy" in needed_groups:
        values.update(_energy_features(x, sr))
    if "pause" in needed_groups:
        values.update(_pause_features(x, sr))

    if needed_groups & (set(PITCH_DEPENDENT_GROUPS) | {"voicing"}):
        try:
            track = track_pitch(segment)
        except NoVoicedFrames:
            values["voiced_fraction"] = 0.0
        else:
            values["voiced_fraction"] = track.voiced_fraction
            if needed_groups & set(PITCH_DEPENDENT_GROUPS):
                values.update(_pitch_features(segment, track))
    return values


def extract_features(segment: SegmentAudio, registry: FeatureRegistry) -> FeatureVector:
    """
    Compute every registry feature for one segment, in registry order.

    Features that cannot be computed (unvoiced segment, too few cycles) or
    that come out non-finite are imputed to 0 and named in
    ``FeatureVector.imputed``.

    Args:
        segment (SegmentAudio): A preprocessed segment.
        registry (FeatureRegistry): Which features to produce, and in which order.

    Returns:
        FeatureVector: Values aligned to the registry.

    Raises:
        ExtractionFailed: If more than half of the registry needed imputation.
    """
    groups = {e.extractor for e in registry.entries}
    if "custom" in groups:
        groups = {"mfcc", "spectral", "flux", "logmel", "energy", "pause", "voicing", *PITCH_DEPENDENT_GROUPS}
    values = _candidate_values(segment, groups)

    resolved, imputed = [], []
    for name in registry.names:
        value = values.get(name, float("nan"))
        if not np.isfinite(value):
            imputed.append(name)
            value = 0.0
        resolved.append(float(value))

    if len(imputed) > len(registry) / 2:
        raise ExtractionFailed(
            f"segment {segment.segment_ref}: {len(imputed)} of {len(registry)} features could not be computed"
        )
    if imputed:
        logger.warning("Imputed %d feature(s) to 0 for segment %s: %s",
                       len(imputed), segment.segment_ref, ", ".join(imputed))
    return FeatureVector(values=tuple(resolved), segment_ref=segment.segment_ref,
                         registry_version=registry.version, imputed=tuple(imputed))


def write_feature_jsonl(vectors: Sequence[FeatureVector], path: Path) -> Path:
    """Persist vectors as JSONL with segment_ref, registry_version, values and imputed names."""
    return write_jsonl(path, (
        {
            "segment_ref": list(v.segment_ref),
            "registry_version": v.registry_version,
            "values": list(v.values),
            "imputed": list(v.imputed),
        }
        for v in vectors
    ))


def read_feature_jsonl(path: Path) -> List[FeatureVector]:
    return [
        FeatureVector(values=tuple(row["values"]), segment_ref=tuple(row["segment_ref"]),
                      registry_version=row["registry_version"], imputed=tuple(row.get("imputed", ())))
        for row in iter_jsonl(path)
    ]
