import pytest

from screener.config import (
    RunConfig,
    build_run_config,
    config_keys,
    load_config_file,
    parse_config_text,
    resolve_config,
)
from screener.errors import ConfigError, ValidationFailure

CONFIG_TEXT = """
# screening run
run.manifest_path = data/manifest.csv
run.modality = features   # prompts from acoustic features
run.strict_validation = no
features.sig_digits = 4
preprocess.denoise_enabled = false
preprocess.segment_seconds = 5
backend.kind = mock_threshold
backend.mock_threshold = 0.02
bootstrap.replicates = 500
"""


# Test case 1:
def test_defaults():
    """
    Checks the documented defaults of a bare RunConfig.
    """
    cfg = RunConfig()
    assert cfg.modality == "features"
    assert cfg.strict_validation is True
    assert cfg.preprocess.target_rate_hz == 16000
    assert cfg.preprocess.segment_seconds == 10.0
    assert cfg.bootstrap.replicates == 10000
    assert cfg.backend.temperature == 0.0
    assert cfg.model_type == "LLM"


# Test case 2:
def test_parse_and_coerce():
    """
    Checks comment stripping and coercion of each section's values to their field types.
    """
    cfg = build_run_config(parse_config_text(CONFIG_TEXT))
    assert cfg.manifest_path == "data/manifest.csv"
    assert cfg.strict_validation is False
    assert cfg.sig_digits == 4
    assert cfg.preprocess.denoise_enabled is False
    assert cfg.preprocess.segment_seconds == 5.0
    assert cfg.backend.kind == "mock_threshold"
    assert cfg.backend.mock_threshold == 0.02
    assert cfg.bootstrap.replicates == 500


# Test case 3:
@pytest.mark.parametrize("text, message", [
    ("run.colour = blue", "unknown config key"),
    ("run.modality = audio\nrun.modality = features", "set twice"),
    ("run.modality features", "expected"),
])
def test_parse_errors(text, message):
    """
    Checks that unknown keys, repeated keys and lines without '=' are rejected with their line.
    """
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text, origin="cfg.txt")


# Test case 4:
@pytest.mark.parametrize("values", [
    {"bootstrap.replicates": "many"},
    {"run.resume": "perhaps"},
    {"run.modality": "video"},
    {"run.report_format": "html"},
    {"backend.temperature": "0.7"},
    {"run.modality": "audio", "backend.kind": "mock_threshold"},
    {"backend.kind": "remote_audio"},
])
def test_invalid_values(values):
    """
    Checks that bad values and invalid combinations raise ConfigError, a validation failure.
    """
    with pytest.raises(ConfigError) as excinfo:
        build_run_config(values)
    assert isinstance(excinfo.value, ValidationFailure)


# Test case 5:
def test_precedence(tmp_path):
    """
    Checks defaults < config file < overrides, with None overrides ignored.
    """
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG_TEXT, encoding="utf-8")
    cfg = resolve_config(str(path), {"bootstrap.replicates": 50, "run.output_dir": None})
    assert cfg.bootstrap.replicates == 50
    assert cfg.backend.mock_threshold == 0.02
    assert cfg.output_dir == "out"


# Test case 6:
def test_missing_config_file(tmp_path):
    """
    Checks that a missing config file is a ConfigError.
    """
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "absent.cfg")


# Test case 7:
def test_config_keys_and_snapshot():
    """
    Checks that every section is exposed and the snapshot lists every settable key.
    """
    keys = config_keys()
    assert keys["bootstrap.replicates"] is int
    assert keys["preprocess.denoise_enabled"] is bool
    assert keys["features.registry_version"] is str
    assert {k.split(".", 1)[0] for k in keys} == {"run", "features", "preprocess", "backend", "bootstrap"}
    assert set(RunConfig().snapshot()) == set(keys)


# Test case 8:
def test_audio_modality_model_type():
    """
    Checks that the audio modality defaults to the LALM model type unless one is given.
    """
    cfg = build_run_config({"run.modality": "audio", "backend.kind": "mock_fixed"})
    assert cfg.model_type == "LALM"
    cfg = build_run_config({"run.modality": "audio", "backend.model_type": "LLM"})
    assert cfg.model_type == "LLM"
