import csv
import io
import json

import pytest

from screener.config import build_run_config
from screener.errors import BackendRefused, StageError, ValidationFailure
from screener.pipeline import STAGES, Pipeline, run_pipeline
from screener.utils import read_jsonl

from .synthetic import steady_voice


def config_for(manifest, out, **extra):
    values = {
        "run.manifest_path": str(manifest),
        "run.output_dir": str(out),
        "preprocess.denoise_enabled": False,
        "backend.kind": "mock_threshold",
        "backend.mock_threshold": 0.02,
        "bootstrap.replicates": 200,
    }
    values.update(extra)
    return build_run_config(values)


# Test case 1:
def test_end_to_end_threshold_oracle(make_corpus, tmp_path):
    """
    Checks that a jitter threshold separating the synthetic voices gives BA 100,
    AUROC 1, Brier 0 and degenerate intervals in every report format.
    """
    manifest = make_corpus()
    out = tmp_path / "out"
    record = run_pipeline(config_for(manifest, out), enable_logging=False)

    assert record.status == "completed"
    assert record.skipped_stages == []
    assert set(record.stage_seconds) == set(STAGES)
    assert record.counters["invalid_outputs"] == 0

    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert len(report) == 1
    row = report[0]
    assert (row["dataset_id"], row["model_type"], row["n_pos"], row["n_neg"]) == ("Synth", "LLM", 10, 10)
    assert row["balanced_accuracy"]["point"] == 100.0
    assert row["auroc"]["point"] == 1.0
    assert row["brier"]["point"] == 0.0
    assert all(row[name]["degenerate"] for name in ("balanced_accuracy", "auroc", "brier"))

    markdown = (out / "report.md").read_text(encoding="utf-8")
    assert "| Synth | LLM | mock | 100.00_{100.00–100.00} | 1.000_{1.000–1.000} |" in markdown
    assert markdown.rstrip().endswith("0.000_{0.000–0.000} |")

    csv_cfg = config_for(manifest, out, **{"run.report_format": "csv"})
    Pipeline(csv_cfg, enable_logging=False).run(stop_after="report", reuse_upstream=True)
    rows = list(csv.DictReader(io.StringIO((out / "report.csv").read_text(encoding="utf-8"))))
    assert len(rows) == 1
    assert (rows[0]["dataset_id"], rows[0]["n_pos"], rows[0]["n_neg"]) == ("Synth", "10", "10")
    for name, value in (("balanced_accuracy", 100.0), ("auroc", 1.0), ("brier", 0.0)):
        assert [float(rows[0][f"{name}_{part}"]) for part in ("point", "lower", "upper")] == [value] * 3

    decisions = read_jsonl(out / "decisions.jsonl")
    assert len(decisions) == 20
    assert all(d["label"] == d["truth"] for d in decisions)
    assert json.loads((out / "run_record.json").read_text(encoding="utf-8"))["status"] == "completed"


# Test case 2:
def test_inverted_threshold_is_always_wrong(make_corpus, tmp_path):
    """
    Checks that inverting the oracle flips every decision: BA 0, AUROC 0, Brier 1.
    """
    manifest = make_corpus()
    pipeline = Pipeline(config_for(manifest, tmp_path / "out", **{"backend.mock_invert": True}), enable_logging=False)
    pipeline.run()
    report = pipeline.load_reports()[0]
    assert report.balanced_accuracy.point == 0.0
    assert report.auroc.point == 0.0
    assert report.brier.point == 1.0


# Test case 3:
def test_intermediates_are_written(make_corpus, tmp_path):
    """
    Checks the per-stage artifacts: one feature vector and one prompt per 2 s recording.
    """
    manifest = make_corpus(n_pd=3, n_hc=3)
    out = tmp_path / "out"
    Pipeline(config_for(manifest, out, **{"run.log_prompts": True}), enable_logging=False).run()

    for name in ("validation.json", "features.jsonl", "prompts.jsonl", "predictions.jsonl",
                 "decisions.jsonl", "report.json", "report.md", "run_record.json"):
        assert (out / name).exists()
    prompts = read_jsonl(out / "prompts.jsonl")
    assert len(prompts) == 6
    assert all("jitter_local: " in p["text"] for p in prompts)
    assert len({p["prompt_sha256"] for p in prompts}) == 6


# Test case 4:
def test_audio_modality_one_prediction_per_recording(make_corpus, tmp_path):
    """
    Checks that the audio modality writes one preprocessed file and one prediction per recording.
    """
    manifest = make_corpus(n_pd=3, n_hc=2)
    out = tmp_path / "out"
    cfg = config_for(manifest, out, **{"run.modality": "audio", "backend.kind": "mock_fixed"})
    Pipeline(cfg, enable_logging=False).run()

    predictions = read_jsonl(out / "predictions.jsonl")
    assert len(predictions) == 5
    assert {p["segment_index"] for p in predictions} == {0}
    assert len(list((out / "audio" / "Synth").glob("*.wav"))) == 5
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))[0]
    assert report["model_type"] == "LALM"
    assert report["sensitivity"]["point"] == 100.0
    assert report["specificity"]["point"] == 0.0


# Test case 5:
def test_resume_skips_every_stage(make_corpus, tmp_path):
    """
    Checks that a resumed run skips all stages and leaves the report unchanged.
    """
    manifest = make_corpus(n_pd=4, n_hc=4)
    out = tmp_path / "out"
    Pipeline(config_for(manifest, out), enable_logging=False).run()
    first = (out / "report.md").read_bytes()

    record = Pipeline(config_for(manifest, out, **{"run.resume": True}), enable_logging=False).run()
    assert record.skipped_stages == list(STAGES)
    assert (out / "report.md").read_bytes() == first


# Test case 6:
def test_single_stage_rerun_reuses_upstream(make_corpus, tmp_path):
    """
    Checks that rerunning the report stage alone re-renders from the stored report.json.
    """
    manifest = make_corpus(n_pd=3, n_hc=3)
    out = tmp_path / "out"
    Pipeline(config_for(manifest, out), enable_logging=False).run()

    cfg = config_for(manifest, out, **{"run.report_format": "csv"})
    record = Pipeline(cfg, enable_logging=False).run(stop_after="report", reuse_upstream=True)
    assert record.skipped_stages == list(STAGES[:-1])
    assert (out / "report.csv").read_text(encoding="utf-8").startswith("dataset_id,model_type,model_name")


# Test case 7:
def test_strict_validation_aborts(make_corpus, tmp_path):
    """
    Checks that a too-short recording stops a strict run at validation, naming the recording.
    """
    short = steady_voice(seconds=0.5)
    manifest = make_corpus(n_pd=3, n_hc=3, extra_rows=[("Synth", "tiny", 0, short)])
    with pytest.raises(StageError) as excinfo:
        Pipeline(config_for(manifest, tmp_path / "out"), enable_logging=False).run()
    assert excinfo.value.stage == "validate"
    assert isinstance(excinfo.value.cause, ValidationFailure)
    assert "Synth/tiny" in excinfo.value.identifiers


# Test case 8:
def test_lenient_validation_excludes_and_continues(make_corpus, tmp_path):
    """
    Checks that without strict validation the flagged recording is excluded and the run completes.
    """
    short = steady_voice(seconds=0.5)
    manifest = make_corpus(n_pd=3, n_hc=3, extra_rows=[("Synth", "tiny", 0, short)])
    out = tmp_path / "out"
    record = Pipeline(config_for(manifest, out, **{"run.strict_validation": False}), enable_logging=False).run()
    assert record.counters["excluded_recordings"] == 1
    decisions = read_jsonl(out / "decisions.jsonl")
    assert "tiny" not in {d["subject_id"] for d in decisions}
    assert len(decisions) == 6


# Test case 9:
def test_single_class_dataset_fails_evaluation(make_corpus, tmp_path):
    """
    Checks that a dataset with only PD subjects fails at evaluation, naming the dataset.
    """
    lone = steady_voice(period=150)
    manifest = make_corpus(n_pd=3, n_hc=3, extra_rows=[("OnlyPD", "p1", 1, lone)])
    cfg = config_for(manifest, tmp_path / "out", **{"run.strict_validation": False})
    with pytest.raises(StageError) as excinfo:
        Pipeline(cfg, enable_logging=False).run()
    assert excinfo.value.stage == "evaluate"
    assert "OnlyPD" in str(excinfo.value)


# Test case 10:
def test_run_log_written(make_corpus, tmp_path):
    """
    Checks that a logged run leaves a log file with the stage messages.
    """
    manifest = make_corpus(n_pd=2, n_hc=2)
    out = tmp_path / "out"
    record = Pipeline(config_for(manifest, out)).run()
    text = open(record.log_file, encoding="utf-8").read()
    assert "STAGE FINISHED: extract" in text
    assert "Final Status: COMPLETED" in text
    assert record.log_file.startswith(str(out / "logs"))


# Test case 11:
def test_backend_failure_names_the_segment(make_corpus, tmp_path, monkeypatch):
    """
    Checks that a batch aborted by the backend fails the infer stage naming the failing segment.
    """
    manifest = make_corpus(n_pd=2, n_hc=2)

    async def refuse(payloads, cfg):
        error = BackendRefused(401, "invalid API key")
        error.payload_index = 1
        raise error

    monkeypatch.setattr("screener.pipeline.predict_many", refuse)
    with pytest.raises(StageError) as excinfo:
        Pipeline(config_for(manifest, tmp_path / "out"), enable_logging=False).run()
    assert excinfo.value.stage == "infer"
    assert isinstance(excinfo.value.cause, BackendRefused)
    assert excinfo.value.identifiers == ("Synth/pd01#0",)


# Test case 12:
def test_report_merges_other_runs(make_corpus, tmp_path):
    """
    Checks that the report stage renders the rows of another run next to its own,
    sorted by dataset, model type and model name.
    """
    manifest = make_corpus(n_pd=3, n_hc=3)
    text_out, audio_out = tmp_path / "text", tmp_path / "audio_run"
    Pipeline(config_for(manifest, text_out), enable_logging=False).run()
    audio_cfg = config_for(manifest, audio_out, **{"run.modality": "audio", "backend.kind": "mock_fixed"})
    Pipeline(audio_cfg, enable_logging=False).run()

    cfg = config_for(manifest, text_out, **{"run.merge_reports": str(audio_out)})
    Pipeline(cfg, enable_logging=False).run(stop_after="report", reuse_upstream=True)
    rows = [line for line in (text_out / "report.md").read_text(encoding="utf-8").splitlines()[2:] if line]
    assert len(rows) == 2
    assert rows[0].startswith("| Synth | LALM |")
    assert rows[1].startswith("| Synth | LLM |")


# Test case 13:
def test_report_merge_of_missing_run_fails(make_corpus, tmp_path):
    """
    Checks that merging a directory without report.json fails the report stage as a validation failure.
    """
    manifest = make_corpus(n_pd=2, n_hc=2)
    out = tmp_path / "out"
    Pipeline(config_for(manifest, out), enable_logging=False).run()
    cfg = config_for(manifest, out, **{"run.merge_reports": str(tmp_path / "nowhere")})
    with pytest.raises(StageError) as excinfo:
        Pipeline(cfg, enable_logging=False).run(stop_after="report", reuse_upstream=True)
    assert excinfo.value.stage == "report"
    assert isinstance(excinfo.value.cause, ValidationFailure)
