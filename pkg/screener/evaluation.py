"""
Subject-level metrics and stratified BCa bootstrap confidence intervals.

Replicate ``b`` draws its resample from a Philox stream keyed by
``(seed, b)``, so replicate statistics do not depend on execution order or
thread count. Each replicate resamples positives and negatives separately,
with replacement, to their original counts. Interval bounds use the
nearest-rank quantile of the sorted replicate statistics.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from .aggregation import SubjectDecision
from .errors import ConfigError, EvaluationFailure, SingleClassInput

logger = logging.getLogger(__name__)

METRIC_NAMES = ("balanced_accuracy", "auroc", "sensitivity", "specificity", "brier")


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 10000
    level: float = 0.95
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError(f"replicates must be positive, got {self.replicates}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a non-negative 64-bit integer, got {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")


@dataclass(frozen=True, eq=False)
class EvaluationInput:
    """Per-subject truth labels, predicted labels and positive-class probabilities."""

    truth: np.ndarray
    pred_label: np.ndarray
    p_pos: np.ndarray

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=np.int64)
        pred = np.asarray(self.pred_label, dtype=np.int64)
        p_pos = np.asarray(self.p_pos, dtype=np.float64)
        if not truth.shape == pred.shape == p_pos.shape or truth.ndim != 1:
            raise ValueError("truth, pred_label and p_pos must be 1-D arrays of equal length")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "pred_label", pred)
        object.__setattr__(self, "p_pos", p_pos)

    @classmethod
    def from_decisions(cls, decisions: Sequence[SubjectDecision]) -> "EvaluationInput":
        return cls(
            truth=[d.truth_label for d in decisions],
            pred_label=[d.final_label for d in decisions],
            p_pos=[d.p_pos for d in decisions],
        )

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.truth == 1))

    @property
    def n_neg(self) -> int:
        return int(np.count_nonzero(self.truth == 0))

    def take(self, indices: np.ndarray) -> "EvaluationInput":
        return EvaluationInput(self.truth[indices], self.pred_label[indices], self.p_pos[indices])

    def __len__(self) -> int:
        return int(self.truth.size)


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    level: float = 0.95
    method: str = "BCa"
    replicates: int = 10000
    seed: int = 0
    degenerate: bool = False

    @property
    def excludes_point(self) -> bool:
        return not self.lower <= self.point <= self.upper

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "method": self.method,
            "replicates": self.replicates,
            "seed": self.seed,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ConfidenceInterval":
        return cls(**row)


@dataclass(frozen=True)
class MetricReport:
    """Five metrics with BCa intervals for one (dataset, model) pair."""

    dataset_id: str
    model_type: str
    model_name: str
    n_pos: int
    n_neg: int
    seed: int
    replicates: int
    balanced_accuracy: ConfidenceInterval
    auroc: ConfidenceInterval
    sensitivity: ConfidenceInterval
    specificity: ConfidenceInterval
    brier: ConfidenceInterval

    def metric(self, name: str) -> ConfidenceInterval:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        row = {
            "dataset_id": self.dataset_id,
            "model_type": self.model_type,
            "model_name": self.model_name,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "seed": self.seed,
            "replicates": self.replicates,
        }
        row.update({name: self.metric(name).to_dict() for name in METRIC_NAMES})
        return row

    @classmethod
    def from_dict(cls, row: dict) -> "MetricReport":
        kwargs = {k: row[k] for k in ("dataset_id", "model_type", "model_name", "n_pos", "n_neg", "seed", "replicates")}
        kwargs.update({name: ConfidenceInterval.from_dict(row[name]) for name in METRIC_NAMES})
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _require_both_classes(inp: EvaluationInput) -> None:
    if inp.n_pos == 0 or inp.n_neg == 0:
        raise SingleClassInput(f"metrics need both classes, got {inp.n_pos} positive and {inp.n_neg} negative subjects")


def sensitivity_specificity(inp: EvaluationInput) -> Tuple[float, float]:
    """
    Sensitivity and specificity in percent.

    Raises:
        SingleClassInput: If either truth class is absent.
    """
    _require_both_classes(inp)
    positives = inp.truth == 1
    tp = np.count_nonzero(inp.pred_label[positives] == 1)
    tn = np.count_nonzero(inp.pred_label[~positives] == 0)
    return 100.0 * tp / inp.n_pos, 100.0 * tn / inp.n_neg


def balanced_accuracy(sensitivity: float, specificity: float) -> float:
    return (sensitivity + specificity) / 2.0


def auroc(inp: EvaluationInput) -> float:
    """
    Area under the ROC curve from the Mann-Whitney rank sum.

    Scores are the positive-class probabilities; tied scores get midranks,
    which credits a tied positive/negative pair with one half.
    """
    _require_both_classes(inp)
    ranks = rankdata(inp.p_pos, method="average")
    n_pos, n_neg = inp.n_pos, inp.n_neg
    rank_sum = ranks[inp.truth == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def brier(inp: EvaluationInput) -> float:
    if len(inp) == 0:
        raise ValueError("brier score needs at least one subject")
    return float(np.mean((inp.p_pos - inp.truth) ** 2))


METRICS: Dict[str, Callable[[EvaluationInput], float]] = {
    "balanced_accuracy": lambda inp: balanced_accuracy(*sensitivity_specificity(inp)),
    "auroc": auroc,
    "sensitivity": lambda inp: sensitivity_specificity(inp)[0],
    "specificity": lambda inp: sensitivity_specificity(inp)[1],
    "brier": brier,
}


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def replicate_indices(truth: np.ndarray, b: int, seed: int) -> np.ndarray:
    """
    Resample indices for replicate ``b``: positives first, then negatives,
    each drawn with replacement from its own stratum.
    """
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) + int(b)))
    positives = np.flatnonzero(truth == 1)
    negatives = np.flatnonzero(truth == 0)
    return np.concatenate([
        positives[rng.integers(0, positives.size, positives.size)],
        negatives[rng.integers(0, negatives.size, negatives.size)],
    ])


def bootstrap_indices(truth: np.ndarray, replicates: int, seed: int) -> np.ndarray:
    """All replicate index sets, shape (replicates, n_subjects)."""
    truth = np.asarray(truth)
    if not np.any(truth == 1) or not np.any(truth == 0):
        raise SingleClassInput("stratified resampling needs both classes")
    out = np.empty((replicates, truth.size), dtype=np.int64)
    for b in range(replicates):
        out[b] = replicate_indices(truth, b, seed)
    return out


def bootstrap_statistics(statistic: Callable[[EvaluationInput], float], inp: EvaluationInput,
                         indices: np.ndarray, workers: int = 1) -> np.ndarray:
    """Evaluate ``statistic`` on every replicate; row ``b`` of ``indices`` fills slot ``b``."""
    replicates = indices.shape[0]
    values = np.empty(replicates, dtype=np.float64)

    def fill(chunk: range) -> None:
        for b in chunk:
            values[b] = statistic(inp.take(indices[b]))

    if workers <= 1:
        fill(range(replicates))
    else:
        bounds = np.linspace(0, replicates, workers + 1).astype(int)
        chunks = [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, chunks))
    return values


def jackknife_acceleration(statistic: Callable[[EvaluationInput], float], inp: EvaluationInput) -> float:
    """
    BCa acceleration from leave-one-subject-out statistics over the pooled
    subject list:

        a = sum(d^3) / (6 * sum(d^2)^1.5),  d = mean(theta_(.)) - theta_(i)

    Leave-one-out inputs on which the statistic is undefined are skipped.
    """
    n = len(inp)
    if min(inp.n_pos, inp.n_neg) < 2:
        logger.warning("Jackknife acceleration is unstable: a class has fewer than 2 subjects (%d positive, %d negative)",
                       inp.n_pos, inp.n_neg)
    everyone = np.arange(n)
    jack = []
    for i in range(n):
        try:
            jack.append(statistic(inp.take(np.delete(everyone, i))))
        except SingleClassInput:
            continue
    jack = np.asarray(jack, dtype=np.float64)
    if jack.size < 2:
        return 0.0
    d = jack.mean() - jack
    denominator = 6.0 * np.sum(d ** 2) ** 1.5
    if denominator == 0.0:
        return 0.0
    return float(np.sum(d ** 3) / denominator)


def _nearest_rank(sorted_values: np.ndarray, alpha: float) -> float:
    b = sorted_values.size
    idx = int(math.ceil(alpha * b)) - 1
    return float(sorted_values[min(max(idx, 0), b - 1)])


def bca_interval(statistic: Callable[[EvaluationInput], float], inp: EvaluationInput,
                 replicates: int = 10000, level: float = 0.95, seed: int = 0,
                 workers: int = 1, indices: Optional[np.ndarray] = None) -> ConfidenceInterval:
    """
    Stratified bias-corrected and accelerated bootstrap interval.

    Args:
        statistic (Callable): Maps an EvaluationInput to a real number.
        inp (EvaluationInput): The observed subjects.
        replicates (int, optional): Bootstrap replicates. Defaults to 10000.
        level (float, optional): Coverage level. Defaults to 0.95.
        seed (int, optional): Master seed of the replicate streams. Defaults to 0.
        workers (int, optional): Threads evaluating replicates; results do not depend on it. Defaults to 1.
        indices (np.ndarray, optional): Precomputed replicate index sets to share across statistics.

    Returns:
        ConfidenceInterval: Point estimate and BCa bounds. When every replicate
        gives the same value the interval collapses to the point and is flagged degenerate.

    Raises:
        SingleClassInput: If either truth class is absent.
    """
    _require_both_classes(inp)
    if indices is None:
        indices = bootstrap_indices(inp.truth, replicates, seed)
    replicates = indices.shape[0]

    theta = float(statistic(inp))
    values = bootstrap_statistics(statistic, inp, indices, workers)
    common = dict(level=level, method="BCa", replicates=replicates, seed=seed)

    if np.all(values == values[0]):
        return ConfidenceInterval(theta, theta, theta, degenerate=True, **common)

    below = np.count_nonzero(values < theta) / replicates
    below = min(max(below, 1.0 / (replicates + 1)), replicates / (replicates + 1.0))
    z0 = norm.ppf(below)
    a = jackknife_acceleration(statistic, inp)

    tail = (1.0 - level) / 2.0
    bounds = []
    for z in (norm.ppf(tail), norm.ppf(1.0 - tail)):
        shifted = z0 + z
        bounds.append(norm.cdf(z0 + shifted / (1.0 - a * shifted)))

    ordered = np.sort(values)
    lower, upper = sorted(_nearest_rank(ordered, alpha) for alpha in bounds)
    interval = ConfidenceInterval(theta, lower, upper, **common)
    if interval.excludes_point:
        logger.warning("BCa interval [%g, %g] excludes its point estimate %g", lower, upper, theta)
    return interval


def evaluate_all(decisions: Sequence[SubjectDecision], seed: int = 0, replicates: int = 10000,
                 level: float = 0.95, workers: int = 1, dataset_id: str = "all",
                 model_name: str = "", model_type: str = "") -> MetricReport:
    """
    All five metrics with BCa intervals, sharing one set of replicate resamples.

    Raises:
        SingleClassInput: If the decisions do not cover both truth classes.
    """
    inp = EvaluationInput.from_decisions(decisions)
    _require_both_classes(inp)
    indices = bootstrap_indices(inp.truth, replicates, seed)
    intervals = {
        name: bca_interval(fn, inp, level=level, seed=seed, workers=workers, indices=indices)
        for name, fn in METRICS.items()
    }
    return MetricReport(dataset_id=dataset_id, model_type=model_type, model_name=model_name,
                        n_pos=inp.n_pos, n_neg=inp.n_neg, seed=seed, replicates=replicates, **intervals)


def evaluate_by_dataset(decisions: Sequence[SubjectDecision], cfg: BootstrapConfig,
                        model_name: str = "", model_type: str = "") -> List[MetricReport]:
    """
    One MetricReport per dataset, datasets in sorted order.

    Raises:
        EvaluationFailure: If a dataset lacks one of the two classes; the message names it.
    """
    groups: Dict[str, List[SubjectDecision]] = {}
    for d in decisions:
        groups.setdefault(d.dataset_id, []).append(d)
    if not groups:
        raise EvaluationFailure("no subject decisions to evaluate")

    reports = []
    for dataset_id in sorted(groups):
        try:
            reports.append(evaluate_all(groups[dataset_id], seed=cfg.seed, replicates=cfg.replicates,
                                        level=cfg.level, workers=cfg.workers, dataset_id=dataset_id,
                                        model_name=model_name, model_type=model_type))
        except SingleClassInput as e:
            raise SingleClassInput(f"dataset {dataset_id!r}: {e}") from e
        logger.info("Evaluated dataset %s: %d subjects", dataset_id, len(groups[dataset_id]))
    return reports
