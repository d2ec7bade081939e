import argparse

from screener.config import config_keys, resolve_config
from screener.errors import BackendFailure, EvaluationFailure, StageError, ValidationFailure
from screener.pipeline import STAGES, Pipeline
from screener.report import FORMATS

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_EVALUATION = 4

# short flag -> config keys it sets
ALIASES = {
    "manifest": ("run.manifest_path",),
    "out": ("run.output_dir",),
    "modality": ("run.modality",),
    "backend_kind": ("backend.kind",),
    "endpoint": ("backend.endpoint_url",),
    "model": ("backend.model_name",),
    "seed": ("bootstrap.seed", "backend.seed"),
    "replicates": ("bootstrap.replicates",),
    "resume": ("run.resume",),
    "strict": ("run.strict_validation",),
    "log_prompts": ("run.log_prompts",),
    "log_raw": ("run.log_raw",),
    "format": ("run.report_format",),
    "merge": ("run.merge_reports",),
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per stage plus `run`."""
    parser = argparse.ArgumentParser(description="Zero-shot speech screening pipeline")
    parser.add_argument("command", choices=list(STAGES) + ["run"],
                        help="Stage to run; earlier stages reuse their outputs when present. 'run' executes all stages")
    parser.add_argument("--config", help="Config file with 'section.key = value' lines")

    parser.add_argument("--manifest", help="Manifest CSV (dataset_id,subject_id,label,audio_path)")
    parser.add_argument("--out", help="Output directory for intermediates and reports")
    parser.add_argument("--modality", choices=["features", "audio"])
    parser.add_argument("--backend-kind", dest="backend_kind",
                        choices=["remote_chat", "remote_audio", "mock_threshold", "mock_fixed"])
    parser.add_argument("--endpoint", help="Chat-completion endpoint URL (e.g. localhost:8000/v1/chat/completions)")
    parser.add_argument("--model", help="Model name sent to the backend")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--resume", action="store_true", default=None, help="Skip stages whose output exists")
    parser.add_argument("--strict", action=argparse.BooleanOptionalAction, default=None,
                        help="Abort on any validation finding (default) or drop flagged recordings")
    parser.add_argument("--log-prompts", dest="log_prompts", action="store_true", default=None)
    parser.add_argument("--log-raw", dest="log_raw", action="store_true", default=None)
    parser.add_argument("--format", choices=list(FORMATS))
    parser.add_argument("--merge", nargs="+", metavar="RUN",
                        help="Other run directories or report.json files whose rows join this report")

    for key in config_keys():
        parser.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)
    return parser


def overrides_from_args(args) -> dict:
    """Collect config overrides; short aliases win over their long `--section.key` forms."""
    values = vars(args)
    overrides = {key: values.get(key) for key in config_keys() if values.get(key) is not None}
    for alias, keys in ALIASES.items():
        value = values.get(alias)
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(value)
        for key in keys:
            overrides[key] = value
    return overrides


def exit_code_for(error: Exception) -> int:
    cause = error.cause if isinstance(error, StageError) else error
    if isinstance(cause, ValidationFailure):
        return EXIT_VALIDATION
    if isinstance(cause, BackendFailure):
        return EXIT_BACKEND
    if isinstance(cause, EvaluationFailure):
        return EXIT_EVALUATION
    return EXIT_UNEXPECTED


def main() -> int:
    """
    Main entry point for the screening CLI.

    Parses arguments, resolves the run config, and runs the requested stages.

    Returns:
        int: Exit code (0 success, 2 validation failure, 3 backend failure,
        4 evaluation failure, 1 anything else).
    """
    parser = build_parser()
    args = parser.parse_args()

    try:
        config = resolve_config(args.config, overrides_from_args(args))
        pipeline = Pipeline(config)
        print(f"Starting {args.command} for manifest: {config.manifest_path}")
        stop_after = "report" if args.command == "run" else args.command
        record = pipeline.run(stop_after=stop_after, reuse_upstream=args.command != "run")
        if args.command in ("run", "report"):
            print(f"Report saved to: {record.artifacts['report']}")
    except (ValidationFailure, BackendFailure, EvaluationFailure, StageError) as e:
        print(f"Error: {e}")
        return exit_code_for(e)
    except Exception as e:
        print(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED

    return EXIT_OK


if __name__ == "__main__":
    exit(main())
