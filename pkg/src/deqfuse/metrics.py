from dataclasses import dataclass
from typing import Dict

import numpy as np
from numpy.typing import NDArray

from deqfuse.errors import NumericError, ShapeError
from deqfuse.logger import get_logger

logger = get_logger("deqfuse.metrics")


@dataclass(frozen=True)
class ClassificationMetrics:
    """Fractions in [0, 1]."""

    accuracy: float
    macro_f1: float
    weighted_f1: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
        }


def per_class_f1(
    predictions: NDArray[np.int64], labels: NDArray[np.int64]
) -> Dict[int, float]:
    """F1 of every class seen in the labels or the predictions; 0 when undefined."""
    scores = {}
    for c in np.union1d(labels, predictions):
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        scores[int(c)] = 2 * tp / denom if denom else 0.0
    return scores


def metrics(
    logits: NDArray[np.float64], labels: NDArray[np.int64]
) -> ClassificationMetrics:
    """
    Accuracy, macro-F1 and support-weighted F1 of arg-max predictions.

    Raises:
        NumericError: No samples.
        ShapeError: Logit rows and labels disagree.
    """
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        logger.error("metrics called with no samples")
        raise NumericError("metrics are undefined for an empty set of samples")
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        logger.error(f"metrics: logits {logits.shape} vs {labels.shape[0]} labels")
        raise ShapeError(f"metrics: logits {logits.shape} vs {labels.shape[0]} labels")

    predictions = np.argmax(logits, axis=1)
    f1 = per_class_f1(predictions, labels)
    support = {c: int(np.sum(labels == c)) for c in f1}
    weighted = sum(f1[c] * support[c] for c in f1) / labels.size
    return ClassificationMetrics(
        accuracy=float(np.mean(predictions == labels)),
        macro_f1=float(np.mean(list(f1.values()))),
        weighted_f1=float(weighted),
    )
