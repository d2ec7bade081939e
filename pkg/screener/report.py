"""Render metric reports as a results table (markdown), csv or json."""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

from .errors import ConfigError
from .evaluation import METRIC_NAMES, ConfidenceInterval, MetricReport

logger = logging.getLogger(__name__)

FORMATS = ("markdown", "csv", "json")
EXTENSIONS = {"markdown": "md", "csv": "csv", "json": "json"}

COLUMNS = ("Dataset", "Type", "Name", "B. Accuracy (%)", "AUROC",
           "Sensitivity (%)", "Specificity (%)", "Brier Score")
DECIMALS = {"balanced_accuracy": 2, "auroc": 3, "sensitivity": 2, "specificity": 2, "brier": 3}

# U+2013 EN DASH between the bounds
RANGE_DASH = "–"


def format_cell(ci: ConfidenceInterval, decimals: int) -> str:
    """``point_{lower–upper}`` with a fixed number of decimals."""
    return f"{ci.point:.{decimals}f}_{{{ci.lower:.{decimals}f}{RANGE_DASH}{ci.upper:.{decimals}f}}}"


def _as_list(reports: Union[MetricReport, Sequence[MetricReport]]) -> List[MetricReport]:
    if isinstance(reports, MetricReport):
        return [reports]
    return list(reports)


def report_key(report: MetricReport) -> Tuple[str, str, str]:
    return report.dataset_id, report.model_type, report.model_name


def load_report_json(path) -> List[MetricReport]:
    """Read the report.json of a run directory, or the file itself."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise ConfigError(f"No report.json found at {path}")
    with open(path, encoding="utf-8") as fh:
        return [MetricReport.from_dict(row) for row in json.load(fh)]


def merge_reports(*groups: Iterable[MetricReport]) -> List[MetricReport]:
    """
    Combine the rows of several runs into one table sorted by dataset,
    model type and model name. When two runs share a row key the first
    one given is kept.
    """
    merged = {}
    for group in groups:
        for report in _as_list(group):
            key = report_key(report)
            if key in merged:
                logger.warning("Duplicate report row %s; keeping the first", "/".join(key))
                continue
            merged[key] = report
    return [merged[key] for key in sorted(merged)]


def _markdown(reports: List[MetricReport]) -> str:
    lines = [
        "| " + " | ".join(COLUMNS) + " |",
        "|" + "|".join("---" for _ in COLUMNS) + "|",
    ]
    for r in reports:
        cells = [r.dataset_id, r.model_type, r.model_name]
        cells += [format_cell(r.metric(name), DECIMALS[name]) for name in METRIC_NAMES]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _csv(reports: List[MetricReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ["dataset_id", "model_type", "model_name", "n_pos", "n_neg"]
    for name in METRIC_NAMES:
        header += [f"{name}_point", f"{name}_lower", f"{name}_upper"]
    writer.writerow(header)
    for r in reports:
        row = [r.dataset_id, r.model_type, r.model_name, r.n_pos, r.n_neg]
        for name in METRIC_NAMES:
            ci = r.metric(name)
            row += [repr(ci.point), repr(ci.lower), repr(ci.upper)]
        writer.writerow(row)
    return buffer.getvalue()


def _json(reports: List[MetricReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def render_report(reports: Union[MetricReport, Sequence[MetricReport]], fmt: str = "markdown") -> str:
    """
    Render one or more MetricReports.

    Args:
        reports (MetricReport | Sequence[MetricReport]): One row per (dataset, model).
        fmt (str, optional): "markdown", "csv" or "json". Defaults to "markdown".

    Returns:
        str: The rendered text, newline-terminated.

    Raises:
        ValueError: For an unknown format.
    """
    renderers = {"markdown": _markdown, "csv": _csv, "json": _json}
    if fmt not in renderers:
        raise ValueError(f"Unknown report format '{fmt}'; expected one of {', '.join(FORMATS)}")
    return renderers[fmt](_as_list(reports))
