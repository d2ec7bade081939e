"""
Corpus loading: dataset manifests, WAV decoding and pre-run validation.

The manifest is a CSV with the fixed header
``dataset_id,subject_id,label,audio_path``. Relative audio paths are
resolved against the manifest's own directory.
"""

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
import soundfile as sf

from .errors import (
    CorruptFile,
    DuplicateSubject,
    EmptyAudio,
    MalformedManifest,
    MissingAudio,
    UnknownLabel,
    UnsupportedEncoding,
)

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["dataset_id", "subject_id", "label", "audio_path"]
LABEL_NAMES = {1: "PD", 0: "HC"}
MIN_USABLE_DURATION_S = 1.0
SUPPORTED_SUBTYPES = {"PCM_16", "FLOAT"}

RecordingKey = Tuple[str, str]


@dataclass(frozen=True)
class RecordingMeta:
    """One speech recording of one subject."""

    dataset_id: str
    subject_id: str
    label: int
    audio_path: Path

    @property
    def key(self) -> RecordingKey:
        return (self.dataset_id, self.subject_id)


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """
    Mono sample buffer.

    Samples are stored as a read-only float64 copy; every buffer is
    immutable after construction and safe to share across threads.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True)
        if samples.ndim != 1:
            raise ValueError(f"AudioBuffer expects a 1-D sample array, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyAudio("audio buffer is empty")
        if not np.all(np.isfinite(samples)):
            raise CorruptFile("audio buffer contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of recordings; class counts are always derived."""

    recordings: Tuple[RecordingMeta, ...]
    source: Optional[Path] = None

    @property
    def counts(self) -> Dict[str, int]:
        tally = Counter(r.label for r in self.recordings)
        return {"PD": tally.get(1, 0), "HC": tally.get(0, 0)}

    @property
    def dataset_ids(self) -> List[str]:
        return sorted({r.dataset_id for r in self.recordings})

    def counts_by_dataset(self) -> Dict[str, Dict[str, int]]:
        """Per-dataset class tallies, datasets in sorted order."""
        result = {}
        for dataset_id in self.dataset_ids:
            labels = Counter(r.label for r in self.recordings if r.dataset_id == dataset_id)
            result[dataset_id] = {"PD": labels.get(1, 0), "HC": labels.get(0, 0)}
        return result

    def without(self, keys: Iterable[RecordingKey]) -> "DatasetManifest":
        """Return a manifest with the given (dataset_id, subject_id) keys removed."""
        drop = set(keys)
        kept = tuple(r for r in self.recordings if r.key not in drop)
        return DatasetManifest(recordings=kept, source=self.source)

    def __len__(self) -> int:
        return len(self.recordings)


@dataclass
class ValidationReport:
    """
    Findings of validate_dataset.

    The report never raises; the orchestrator decides between aborting
    (strict mode) and dropping the flagged recordings (lenient mode).
    """

    counts: Dict[str, int]
    counts_by_dataset: Dict[str, Dict[str, int]]
    missing_files: List[RecordingKey] = field(default_factory=list)
    undecodable: List[Tuple[RecordingKey, str]] = field(default_factory=list)
    too_short: List[Tuple[RecordingKey, float]] = field(default_factory=list)
    single_class_datasets: List[str] = field(default_factory=list)
    durations_s: Dict[RecordingKey, float] = field(default_factory=dict)

    @property
    def flagged_keys(self) -> Set[RecordingKey]:
        keys = set(self.missing_files)
        keys.update(k for k, _ in self.undecodable)
        keys.update(k for k, _ in self.too_short)
        return keys

    @property
    def findings(self) -> List[str]:
        lines = []
        for dataset_id, subject_id in self.missing_files:
            lines.append(f"missing file: {dataset_id}/{subject_id}")
        for (dataset_id, subject_id), reason in self.undecodable:
            lines.append(f"undecodable: {dataset_id}/{subject_id} - {reason}")
        for (dataset_id, subject_id), duration in self.too_short:
            lines.append(
                f"too short: {dataset_id}/{subject_id} ({duration:.3f}s < {MIN_USABLE_DURATION_S:.1f}s)"
            )
        for dataset_id in self.single_class_datasets:
            lines.append(f"single-class dataset blocks evaluation: {dataset_id}")
        return lines

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "counts_by_dataset": self.counts_by_dataset,
            "missing_files": [list(k) for k in self.missing_files],
            "undecodable": [[*k, reason] for k, reason in self.undecodable],
            "too_short": [[*k, round(d, 6)] for k, d in self.too_short],
            "durations_s": [[*k, round(d, 6)] for k, d in self.durations_s.items()],
            "single_class_datasets": list(self.single_class_datasets),
            "findings": self.findings,
        }


def _parse_label(raw: str, line_no: int) -> int:
    if raw == "1":
        return 1
    if raw == "0":
        return 0
    raise UnknownLabel(f"line {line_no}: label must be the digit 0 or 1, got {raw!r}")


def load_manifest(path) -> DatasetManifest:
    """
    Load a dataset manifest CSV.

    Args:
        path (str | Path): Path to the manifest file.

    Returns:
        DatasetManifest: One RecordingMeta per data row, in file order.

    Raises:
        MalformedManifest: If the file is empty, the header differs or a row is malformed.
        DuplicateSubject: If a (dataset_id, subject_id) pair repeats.
        UnknownLabel: If a label is not the literal digit 0 or 1.
    """
    path = Path(path)
    if not path.is_file():
        raise MalformedManifest(f"Manifest file does not exist: {path}")

    base_dir = path.parent
    recordings: List[RecordingMeta] = []
    seen: Set[RecordingKey] = set()

    # csv handles both LF and CRLF when the file is opened with newline=""
    with path.open("r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedManifest(f"Manifest is empty: {path}")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise MalformedManifest(
                f"Manifest header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise MalformedManifest(f"line {line_no}: expected 4 fields, got {len(row)}")
            dataset_id, subject_id, label_raw, audio_raw = (cell.strip() for cell in row)
            if not dataset_id or not subject_id or not audio_raw:
                raise MalformedManifest(f"line {line_no}: empty dataset_id, subject_id or audio_path")

            label = _parse_label(label_raw, line_no)
            key = (dataset_id, subject_id)
            if key in seen:
                raise DuplicateSubject(f"line {line_no}: duplicate subject {subject_id!r} in dataset {dataset_id!r}")
            seen.add(key)

            audio_path = Path(audio_raw)
            if not audio_path.is_absolute():
                audio_path = base_dir / audio_path
            recordings.append(RecordingMeta(dataset_id, subject_id, label, audio_path))

    if not recordings:
        raise MalformedManifest(f"Manifest has a header but no recordings: {path}")

    manifest = DatasetManifest(recordings=tuple(recordings), source=path)
    logger.info("Loaded manifest %s: %d recordings %s", path, len(manifest), manifest.counts)
    return manifest


def decode_wav(path) -> AudioBuffer:
    """
    Decode a RIFF/WAVE file into a mono buffer.

    PCM16 samples are scaled by 1/32768; multi-channel audio is downmixed
    by the per-frame arithmetic mean of its channels.

    Raises:
        MissingAudio: If the file does not exist.
        UnsupportedEncoding: If the file is not WAV with PCM_16 or FLOAT samples.
        CorruptFile: If libsndfile cannot read the file.
        EmptyAudio: If the file holds no frames.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAudio(f"Audio file not found: {path}")

    try:
        info = sf.info(str(path))
    except (RuntimeError, sf.SoundFileError) as e:
        raise CorruptFile(f"Cannot open {path}: {e}") from e

    if info.format not in ("WAV", "WAVEX") or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedEncoding(f"{path}: {info.format}/{info.subtype} is not PCM_16 or FLOAT WAV")
    if info.frames == 0:
        raise EmptyAudio(f"{path} contains no audio frames")

    try:
        data, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, sf.SoundFileError) as e:
        raise CorruptFile(f"Cannot decode {path}: {e}") from e

    if data.shape[0] == 0:
        raise EmptyAudio(f"{path} contains no audio frames")
    if not np.all(np.isfinite(data)):
        raise CorruptFile(f"{path} contains non-finite samples")

    mono = data[:, 0] if data.shape[1] == 1 else data.mean(axis=1)
    return AudioBuffer(samples=mono, sample_rate_hz=sample_rate)


def encode_wav(audio: AudioBuffer, path) -> Path:
    """Write a buffer as a mono float32 WAV file, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), audio.samples, audio.sample_rate_hz, subtype="FLOAT", format="WAV")
    return path


def _probe(recording: RecordingMeta):
    if not recording.audio_path.is_file():
        return "missing", None
    try:
        audio = decode_wav(recording.audio_path)
    except (UnsupportedEncoding, CorruptFile, EmptyAudio) as e:
        return "undecodable", str(e)
    return "ok", audio.duration_s


def validate_dataset(manifest: DatasetManifest, workers: int = 1,
                     min_duration_s: float = MIN_USABLE_DURATION_S) -> ValidationReport:
    """
    Check every recording of a manifest and report what is wrong.

    Args:
        manifest (DatasetManifest): The loaded manifest.
        workers (int, optional): Number of threads decoding files. Defaults to 1.
        min_duration_s (float, optional): Minimum usable duration. Defaults to 1.0.

    Returns:
        ValidationReport: Counts plus missing, undecodable and too-short recordings
        and any dataset that lacks one of the two classes.
    """
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        probes = list(pool.map(_probe, manifest.recordings))

    report = ValidationReport(counts=manifest.counts, counts_by_dataset=manifest.counts_by_dataset())
    for recording, (status, detail) in zip(manifest.recordings, probes):
        if status == "missing":
            report.missing_files.append(recording.key)
        elif status == "undecodable":
            report.undecodable.append((recording.key, detail))
        else:
            report.durations_s[recording.key] = detail
            if detail < min_duration_s:
                report.too_short.append((recording.key, detail))

    for dataset_id, tally in report.counts_by_dataset.items():
        if tally["PD"] == 0 or tally["HC"] == 0:
            report.single_class_datasets.append(dataset_id)

    for finding in report.findings:
        logger.warning("Validation: %s", finding)
    return report
