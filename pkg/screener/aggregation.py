"""
Segment-to-subject aggregation.

The subject label is the majority vote over segment labels. A vote tie
goes to the label whose segments have the higher mean probability, and a
tie on both goes to label 1. The subject probability is the mean
probability of the segments that carry the final label.
"""

import logging
from dataclasses import dataclass
from math import fsum
from typing import List, Optional, Sequence, Tuple

from .backends import ModelPrediction
from .errors import AllSegmentsInvalid, EmptyPredictionList
from .utils import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

FULL_TIE_LABEL = 1


@dataclass(frozen=True)
class SubjectDecision:
    dataset_id: str
    subject_id: str
    final_label: int
    subject_probability: float
    segment_predictions: Tuple[ModelPrediction, ...]
    truth_label: int
    n_invalid: int = 0

    def __post_init__(self):
        if not self.segment_predictions:
            raise EmptyPredictionList(f"subject {self.dataset_id}/{self.subject_id} has no valid segment predictions")
        object.__setattr__(self, "segment_predictions", tuple(self.segment_predictions))

    @property
    def p_pos(self) -> float:
        return positive_class_probability(self)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "subject_id": self.subject_id,
            "truth": self.truth_label,
            "label": self.final_label,
            "p_pos": self.p_pos,
            "subject_probability": self.subject_probability,
            "n_segments": len(self.segment_predictions) + self.n_invalid,
            "n_invalid": self.n_invalid,
        }


def _mean(values: Sequence[float]) -> float:
    # fsum keeps the mean independent of input order
    return fsum(values) / len(values)


def aggregate_subject(preds: Sequence[ModelPrediction]) -> Tuple[int, float]:
    """
    Combine segment predictions into one (label, probability) pair.

    Args:
        preds (Sequence[ModelPrediction]): Valid segment predictions of one subject.

    Returns:
        tuple: The final label and the mean probability of segments carrying it.

    Raises:
        EmptyPredictionList: If ``preds`` is empty.
    """
    if not preds:
        raise EmptyPredictionList("cannot aggregate an empty prediction list")

    by_label = {0: [], 1: []}
    for p in preds:
        by_label[p.label].append(p.probability)

    votes_0, votes_1 = len(by_label[0]), len(by_label[1])
    if votes_1 != votes_0:
        label = 1 if votes_1 > votes_0 else 0
    else:
        mean_0, mean_1 = _mean(by_label[0]), _mean(by_label[1])
        if mean_1 != mean_0:
            label = 1 if mean_1 > mean_0 else 0
        else:
            label = FULL_TIE_LABEL
    return label, _mean(by_label[label])


def positive_class_probability(decision: SubjectDecision) -> float:
    """Probability of the positive class implied by a decision."""
    if decision.final_label == 1:
        return decision.subject_probability
    return 1.0 - decision.subject_probability


def decide_subject(dataset_id: str, subject_id: str, truth_label: int,
                   preds: Sequence[Optional[ModelPrediction]]) -> SubjectDecision:
    """
    Build a SubjectDecision from a subject's segment predictions.

    ``None`` entries stand for segments whose model output was invalid;
    they are excluded from the vote and counted in ``n_invalid``.

    Raises:
        EmptyPredictionList: If no predictions were given at all.
        AllSegmentsInvalid: If every segment prediction is invalid.
    """
    if not preds:
        raise EmptyPredictionList(f"subject {dataset_id}/{subject_id} has no segment predictions")
    valid: List[ModelPrediction] = [p for p in preds if p is not None]
    n_invalid = len(preds) - len(valid)
    if not valid:
        raise AllSegmentsInvalid(f"every segment of subject {dataset_id}/{subject_id} produced invalid output")
    if n_invalid:
        logger.warning("Subject %s/%s: %d of %d segment outputs invalid, excluded from the vote",
                       dataset_id, subject_id, n_invalid, len(preds))

    label, probability = aggregate_subject(valid)
    return SubjectDecision(dataset_id, subject_id, label, probability, tuple(valid), truth_label, n_invalid)


def write_decisions_jsonl(decisions: Sequence[SubjectDecision], path):
    rows = []
    for d in decisions:
        row = d.to_dict()
        row["segment_predictions"] = [p.to_dict() for p in d.segment_predictions]
        rows.append(row)
    return write_jsonl(path, rows)


def read_decisions_jsonl(path) -> List[SubjectDecision]:
    decisions = []
    for row in iter_jsonl(path):
        preds = tuple(ModelPrediction.from_dict(p) for p in row["segment_predictions"])
        decisions.append(SubjectDecision(
            dataset_id=row["dataset_id"],
            subject_id=row["subject_id"],
            final_label=int(row["label"]),
            subject_probability=float(row["subject_probability"]),
            segment_predictions=preds,
            truth_label=int(row["truth"]),
            n_invalid=int(row.get("n_invalid", 0)),
        ))
    return decisions
