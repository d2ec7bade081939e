"""
Run configuration.

A config file is plain UTF-8 text with one ``section.key = value`` per
line; ``#`` starts a comment. Sections are ``run``, ``features``,
``preprocess``, ``backend`` and ``bootstrap``. Values are coerced to the
type of the matching dataclass field. Precedence, lowest first: dataclass
defaults, config file, command-line flags.
"""

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .backends import BackendConfig
from .errors import ConfigError
from .evaluation import BootstrapConfig
from .preprocess import PreprocessConfig
from .report import FORMATS

MODALITIES = ("features", "audio")
REGISTRY_VERSIONS = ("v1", "v1-76")
DEFAULT_MODEL_TYPE = {"features": "LLM", "audio": "LALM"}

RUN_KEYS = ("manifest_path", "output_dir", "modality", "strict_validation", "resume",
            "log_prompts", "log_raw", "report_format", "merge_reports", "workers")
FEATURE_KEYS = ("registry_version", "sig_digits")

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    manifest_path: str = ""
    output_dir: str = "out"
    modality: str = "features"
    strict_validation: bool = True
    resume: bool = False
    log_prompts: bool = False
    log_raw: bool = False
    report_format: str = "markdown"
    # comma-separated run directories or report.json files rendered with this run
    merge_reports: str = ""
    workers: int = 1
    registry_version: str = "v1"
    sig_digits: int = 6
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"run.modality must be one of {', '.join(MODALITIES)}, got {self.modality!r}")
        if self.report_format not in FORMATS:
            raise ConfigError(f"run.report_format must be one of {', '.join(FORMATS)}, got {self.report_format!r}")
        if self.registry_version not in REGISTRY_VERSIONS:
            raise ConfigError(f"features.registry_version must be one of {', '.join(REGISTRY_VERSIONS)}")
        if self.sig_digits < 1 or self.workers < 1:
            raise ConfigError("features.sig_digits and run.workers must be positive")
        if self.modality == "audio" and self.backend.kind in ("remote_chat", "mock_threshold"):
            raise ConfigError(f"backend kind {self.backend.kind!r} cannot take audio prompts")
        if self.modality == "features" and self.backend.kind == "remote_audio":
            raise ConfigError("backend kind 'remote_audio' expects run.modality = audio")

    @property
    def model_type(self) -> str:
        return self.backend.model_type or DEFAULT_MODEL_TYPE[self.modality]

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def merge_paths(self) -> Tuple[Path, ...]:
        return tuple(Path(p.strip()) for p in self.merge_reports.split(",") if p.strip())

    def snapshot(self) -> Dict[str, Any]:
        """Flat ``section.key -> value`` view of every setting."""
        flat = {}
        for section, (owner, keys) in _schema().items():
            source = self if owner is RunConfig else getattr(self, section)
            for key in keys:
                flat[f"{section}.{key}"] = getattr(source, key)
        return flat


def _schema() -> Dict[str, Tuple[type, Tuple[str, ...]]]:
    def all_fields(cls):
        return tuple(f.name for f in dataclasses.fields(cls))

    return {
        "run": (RunConfig, RUN_KEYS),
        "features": (RunConfig, FEATURE_KEYS),
        "preprocess": (PreprocessConfig, all_fields(PreprocessConfig)),
        "backend": (BackendConfig, all_fields(BackendConfig)),
        "bootstrap": (BootstrapConfig, all_fields(BootstrapConfig)),
    }


def config_keys() -> Dict[str, type]:
    """Every settable ``section.key`` with the type its value is coerced to."""
    keys = {}
    for section, (owner, names) in _schema().items():
        hints = typing.get_type_hints(owner)
        for name in names:
            keys[f"{section}.{name}"] = hints[name]
    return keys


def _coerce(key: str, raw: Any, target: type) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if typing.get_origin(target) is typing.Union:
        if text.lower() in ("", "none", "null"):
            return None
        target = next(t for t in typing.get_args(target) if t is not type(None))
    try:
        if target is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if target is int:
            return int(text)
        if target is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return text


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    """
    Parse config file text into raw ``section.key -> value`` strings.

    Raises:
        ConfigError: On a line without ``=``, an unknown key or a repeated key.
    """
    known = config_keys()
    values: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{line_no}: expected 'section.key = value'")
        if key not in known:
            raise ConfigError(f"{origin}:{line_no}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"{origin}:{line_no}: '{key}' set twice")
        values[key] = value.strip()
    return values


def load_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), origin=str(path))


def build_run_config(values: Mapping[str, Any]) -> RunConfig:
    """
    Build a RunConfig from ``section.key`` values, defaults filling the rest.

    Raises:
        ConfigError: On unknown keys, uncoercible values or invalid combinations.
    """
    known = config_keys()
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    sections: Dict[str, Dict[str, Any]] = {}
    for key, raw in values.items():
        section, name = key.split(".", 1)
        sections.setdefault(section, {})[name] = _coerce(key, raw, known[key])

    run_kwargs = {**sections.get("run", {}), **sections.get("features", {})}
    return RunConfig(
        preprocess=PreprocessConfig(**sections.get("preprocess", {})),
        backend=BackendConfig(**sections.get("backend", {})),
        bootstrap=BootstrapConfig(**sections.get("bootstrap", {})),
        **run_kwargs,
    )


def resolve_config(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (None values are ignored)."""
    values: Dict[str, Any] = {}
    if config_path:
        values.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_run_config(values)
