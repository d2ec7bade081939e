import asyncio
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .aggregation import SubjectDecision, decide_subject, read_decisions_jsonl, write_decisions_jsonl
from .backends import ModelPrediction, predict_many
from .config import RunConfig
from .corpus import DatasetManifest, RecordingMeta, decode_wav, encode_wav, load_manifest, validate_dataset
from .errors import (
    AllSegmentsInvalid,
    BackendFailure,
    ConfigError,
    ExtractionFailed,
    InvalidModelOutput,
    RecordingTooShort,
    ScreenerError,
    SingleClassInput,
    StageError,
    ValidationFailure,
)
from .evaluation import MetricReport, evaluate_by_dataset
from .features import FeatureRegistry, extract_features, read_feature_jsonl, write_feature_jsonl
from .logger import RunLogger
from .preprocess import preprocess_recording, segment
from .prompting import PromptPayload, build_audio_prompt, build_feature_prompt, serialize_features
from .report import EXTENSIONS, load_report_json, merge_reports, render_report
from .utils import append_jsonl, read_json, read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

STAGES = ("validate", "extract", "infer", "aggregate", "evaluate", "report")

SegmentKey = Tuple[str, str, int]


@dataclass
class RunRecord:
    """What a run did: config, artifacts, per-stage wall-clock and audit counters."""

    config: Dict[str, object]
    artifacts: Dict[str, str] = field(default_factory=dict)
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    skipped_stages: List[str] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=lambda: {
        "excluded_recordings": 0,
        "imputed_features": 0,
        "invalid_outputs": 0,
        "placeholder_probabilities": 0,
    })
    status: str = "running"
    log_file: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "artifacts": self.artifacts,
            "stage_seconds": self.stage_seconds,
            "skipped_stages": self.skipped_stages,
            "counters": self.counters,
            "status": self.status,
            "log_file": self.log_file,
        }


class Pipeline:
    """
    Runs the screening stages in order: validate, extract, infer,
    aggregate, evaluate, report. Every stage persists its output under the
    output directory and the next stage reads it back from there.
    """

    def __init__(self, config: RunConfig, enable_logging: bool = True):
        """
        Initialize the Pipeline.

        Args:
            config (RunConfig): Fully resolved run configuration.
            enable_logging (bool, optional): Whether to write a run log file. Defaults to True.

        Raises:
            ConfigError: If no manifest path is configured.
        """
        if not config.manifest_path:
            raise ConfigError("run.manifest_path is required (use --manifest)")

        self.config = config
        self.out = config.output_path
        self.registry = FeatureRegistry.for_version(config.registry_version)
        self.record = RunRecord(config=config.snapshot())
        self.manifest: Optional[DatasetManifest] = None

        self.enable_logging = enable_logging
        self.run_logger = None
        if enable_logging:
            self.out.mkdir(parents=True, exist_ok=True)
            self.run_logger = RunLogger(str(self.out), config.modality)
            self.run_logger.log_config(self.record.config)

    # artifact paths

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def extract_artifact(self) -> Path:
        return self.path("features.jsonl" if self.config.modality == "features" else "audio_index.jsonl")

    def stage_output(self, stage: str) -> Path:
        return {
            "validate": self.path("validation.json"),
            "extract": self.extract_artifact,
            "infer": self.path("predictions.jsonl"),
            "aggregate": self.path("decisions.jsonl"),
            "evaluate": self.path("report.json"),
            "report": self.path(f"report.{EXTENSIONS[self.config.report_format]}"),
        }[stage]

    # orchestration

    def run(self, stop_after: str = "report", reuse_upstream: bool = False) -> RunRecord:
        """
        Execute the stages up to and including ``stop_after``.

        With ``resume`` set, a stage whose output file exists is skipped.
        With ``reuse_upstream`` set, stages before ``stop_after`` are reused
        when their output exists, so a single stage can be rerun on its own.

        Returns:
            RunRecord: The record, also written to run_record.json.

        Raises:
            StageError: Naming the failing stage and the offending identifiers.
        """
        if stop_after not in STAGES:
            raise ValueError(f"unknown stage '{stop_after}'")
        last = STAGES.index(stop_after)
        self.out.mkdir(parents=True, exist_ok=True)
        start_time = time.perf_counter()

        try:
            self.manifest = load_manifest(self.config.manifest_path)
            for i, stage in enumerate(STAGES[: last + 1]):
                output = self.stage_output(stage)
                reuse = output.exists() and (self.config.resume or (reuse_upstream and i < last))
                self.record.artifacts[stage] = str(output)
                if reuse:
                    self.record.skipped_stages.append(stage)
                    if self.run_logger:
                        self.run_logger.log_stage_skipped(stage, f"{output.name} exists")
                    reload = getattr(self, f"_reload_{stage}", None)
                    if reload:
                        reload()
                    continue

                if self.run_logger:
                    self.run_logger.log_stage_started(stage)
                stage_start = time.perf_counter()
                try:
                    getattr(self, f"_stage_{stage}")()
                except StageError:
                    raise
                except ScreenerError as e:
                    raise StageError(stage, e) from e
                elapsed = time.perf_counter() - stage_start
                self.record.stage_seconds[stage] = round(elapsed, 6)
                if self.run_logger:
                    self.run_logger.log_stage_finished(stage, elapsed, str(output))
            self.record.status = "completed"
        except Exception as e:
            self.record.status = "failed"
            if self.run_logger:
                self.run_logger.log_error(getattr(e, "stage", "setup"), e)
            raise
        finally:
            elapsed_time = time.perf_counter() - start_time
            print("\nRun Summary:")
            print(f"Elapsed Time: {elapsed_time:.2f} seconds")
            print(f"Status: {self.record.status}")
            for key in sorted(self.record.counters):
                print(f"{key.replace('_', ' ').capitalize()}: {self.record.counters[key]}")

            if self.run_logger:
                self.record.log_file = self.run_logger.log_summary(self.record.counters, self.record.status)
                print(f"Log saved to: {self.record.log_file}")
            write_json(self.path("run_record.json"), self.record.to_dict())

        return self.record

    # validate

    def _stage_validate(self):
        report = validate_dataset(self.manifest, workers=self.config.workers)
        payload = report.to_dict()
        payload["excluded"] = [list(k) for k in sorted(report.flagged_keys)]
        if self.run_logger:
            self.run_logger.log_validation(report.counts, report.findings)

        if not report.ok and self.config.strict_validation:
            raise StageError(
                "validate",
                ValidationFailure(f"{len(report.findings)} validation finding(s): " + "; ".join(report.findings)),
                [f"{d}/{s}" for d, s in sorted(report.flagged_keys)] + report.single_class_datasets,
            )
        write_json(self.path("validation.json"), payload)
        self._apply_exclusions(report.flagged_keys)

    def _reload_validate(self):
        payload = read_json(self.path("validation.json"))
        self._apply_exclusions({tuple(k) for k in payload.get("excluded", [])})

    def _apply_exclusions(self, keys):
        if not keys:
            return
        for dataset_id, subject_id in sorted(keys):
            logger.warning("Excluding recording %s/%s from the run", dataset_id, subject_id)
        self.manifest = self.manifest.without(keys)
        self.record.counters["excluded_recordings"] = len(keys)

    # extract

    def _extract_recording(self, recording: RecordingMeta):
        audio = preprocess_recording(decode_wav(recording.audio_path), self.config.preprocess)
        if self.config.modality == "audio":
            target = self.out / "audio" / recording.dataset_id / f"{recording.subject_id}.wav"
            encode_wav(audio, target)
            return [{"dataset_id": recording.dataset_id, "subject_id": recording.subject_id,
                     "audio_path": str(target)}]
        segments = segment(audio, self.config.preprocess, recording.key)
        return [extract_features(s, self.registry) for s in segments]

    def _stage_extract(self):
        def work(recording):
            try:
                return self._extract_recording(recording)
            except (ExtractionFailed, RecordingTooShort, ValidationFailure) as e:
                raise StageError("extract", e, [f"{recording.dataset_id}/{recording.subject_id}"]) from e

        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            results = list(pool.map(work, self.manifest.recordings))

        rows = [item for per_recording in results for item in per_recording]
        if self.config.modality == "audio":
            write_jsonl(self.extract_artifact, rows)
        else:
            write_feature_jsonl(rows, self.extract_artifact)
        self._count_imputed()

    def _reload_extract(self):
        self._count_imputed()

    def _count_imputed(self):
        if self.config.modality == "features":
            vectors = read_feature_jsonl(self.extract_artifact)
            self.record.counters["imputed_features"] = sum(len(v.imputed) for v in vectors)

    # infer

    def _prompts(self) -> Tuple[List[SegmentKey], List[PromptPayload]]:
        keys, payloads = [], []
        wanted = {r.key for r in self.manifest.recordings}
        if self.config.modality == "audio":
            for row in read_jsonl(self.extract_artifact):
                if (row["dataset_id"], row["subject_id"]) not in wanted:
                    continue
                keys.append((row["dataset_id"], row["subject_id"], 0))
                payloads.append(build_audio_prompt(row["audio_path"]))
        else:
            for vector in read_feature_jsonl(self.extract_artifact):
                if vector.segment_ref[:2] not in wanted:
                    continue
                keys.append(vector.segment_ref)
                serialized = serialize_features(vector, self.registry, self.config.sig_digits)
                payloads.append(build_feature_prompt(serialized))
        return keys, payloads

    def _stage_infer(self):
        keys, payloads = self._prompts()

        prompt_rows = []
        for (dataset_id, subject_id, index), payload in zip(keys, payloads):
            row = {"dataset_id": dataset_id, "subject_id": subject_id, "segment_index": index,
                   "modality": payload.modality, "prompt_sha256": payload.sha256}
            if self.config.log_prompts:
                row["text"] = payload.user_text
                row["audio_ref"] = str(payload.audio_ref) if payload.audio_ref else None
            prompt_rows.append(row)
        write_jsonl(self.path("prompts.jsonl"), prompt_rows)

        try:
            batch = asyncio.run(predict_many(payloads, self.config.backend))
        except BackendFailure as e:
            failed = []
            if e.payload_index is not None:
                dataset_id, subject_id, index = keys[e.payload_index]
                failed.append(f"{dataset_id}/{subject_id}#{index}")
            raise StageError("infer", e, failed) from e

        rows = []
        raw_path = self.path("raw_responses.jsonl")
        if self.config.log_raw and raw_path.exists():
            raw_path.unlink()
        for (dataset_id, subject_id, index), response, error in zip(keys, batch.responses, batch.errors):
            row = {"dataset_id": dataset_id, "subject_id": subject_id, "segment_index": index}
            if error is not None:
                row.update(valid=False, error=str(error), prediction=None)
            else:
                row.update(valid=True, error=None, prediction=response.prediction.to_dict())
            rows.append(row)
            if self.config.log_raw:
                append_jsonl(raw_path, {"dataset_id": dataset_id, "subject_id": subject_id,
                                        "segment_index": index,
                                        "body": response.raw_body if response else None,
                                        "error": str(error) if error else None})
        write_jsonl(self.path("predictions.jsonl"), rows)
        self._count_predictions(rows)

    def _reload_infer(self):
        self._count_predictions(read_jsonl(self.path("predictions.jsonl")))

    def _count_predictions(self, rows):
        self.record.counters["invalid_outputs"] = sum(1 for r in rows if not r["valid"])
        self.record.counters["placeholder_probabilities"] = sum(
            1 for r in rows if r["valid"] and r["prediction"].get("placeholder_probability")
        )

    # aggregate

    def _stage_aggregate(self):
        grouped: Dict[Tuple[str, str], List[Optional[ModelPrediction]]] = {}
        for row in read_jsonl(self.path("predictions.jsonl")):
            prediction = ModelPrediction.from_dict(row["prediction"]) if row["valid"] else None
            grouped.setdefault((row["dataset_id"], row["subject_id"]), []).append(prediction)

        decisions: List[SubjectDecision] = []
        for recording in self.manifest.recordings:
            preds = grouped.get(recording.key)
            if not preds:
                raise StageError("aggregate", InvalidModelOutput("no predictions recorded"),
                                 [f"{recording.dataset_id}/{recording.subject_id}"])
            try:
                decisions.append(decide_subject(recording.dataset_id, recording.subject_id, recording.label, preds))
            except AllSegmentsInvalid as e:
                raise StageError("aggregate", e, [f"{recording.dataset_id}/{recording.subject_id}"]) from e
        write_decisions_jsonl(decisions, self.path("decisions.jsonl"))

    # evaluate

    def _stage_evaluate(self):
        decisions = read_decisions_jsonl(self.path("decisions.jsonl"))
        try:
            reports = evaluate_by_dataset(decisions, self.config.bootstrap,
                                          model_name=self.config.backend.model_name,
                                          model_type=self.config.model_type)
        except SingleClassInput as e:
            blocked = [d for d, tally in self.manifest.counts_by_dataset().items() if 0 in tally.values()]
            raise StageError("evaluate", e, blocked) from e
        write_json(self.path("report.json"), [r.to_dict() for r in reports])

    # report

    def load_reports(self) -> List[MetricReport]:
        return [MetricReport.from_dict(row) for row in read_json(self.path("report.json"))]

    def _stage_report(self):
        others = [load_report_json(path) for path in self.config.merge_paths]
        if others:
            logger.info("Merging report rows from %d other run(s)", len(others))
        text = render_report(merge_reports(self.load_reports(), *others), self.config.report_format)
        target = self.stage_output("report")
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def run_pipeline(config: RunConfig, stop_after: str = "report", enable_logging: bool = True) -> RunRecord:
    """Run every stage up to ``stop_after`` for ``config`` and return the RunRecord."""
    return Pipeline(config, enable_logging=enable_logging).run(stop_after=stop_after)
