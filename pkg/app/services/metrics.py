import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.metrics import f1_score

from app.core.errors import EmptyBatchError, ShapeError
from app.services.objective import Prediction

logger = logging.getLogger(__name__)


def _labels_for(predictions: Prediction, labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyBatchError("metric requested on an empty batch")
    if labels.shape[0] != predictions.combined_log_scores.shape[0]:
        raise ShapeError(
            "one label per prediction row required",
            [labels.shape, predictions.combined_log_scores.shape],
        )
    return labels


def accuracy(predictions: Prediction, labels: Sequence[int]) -> float:
    """Fraction of rows whose score argmax (lowest index on ties) equals the label."""
    labels = _labels_for(predictions, labels)
    return float(np.mean(predictions.predicted_classes() == labels))


def weighted_f1(predictions: Prediction, labels: Sequence[int]) -> float:
    """Per-class F1 averaged by true-class support; absent classes are excluded."""
    labels = _labels_for(predictions, labels)
    return float(
        f1_score(
            labels,
            predictions.predicted_classes(),
            labels=np.unique(labels),
            average="weighted",
            zero_division=0,
        )
    )


@dataclass
class EvaluationAccumulator:
    """
    Order-independent reduction over evaluation batches.

    Counts and sums are accumulated first and divided once at the end, so the
    result does not depend on how the split was sharded.
    """

    n_samples: int = 0
    loss_sum: float = 0.0
    task_sum: float = 0.0
    kl_sum: float = 0.0
    correct: int = 0
    elbo_sum: float = 0.0
    elbo_samples: int = 0
    true_labels: list = field(default_factory=list)
    predicted: list = field(default_factory=list)

    def update(
        self,
        predictions: Prediction,
        labels: Sequence[int],
        loss: float,
        task: float,
        kl: float,
    ) -> None:
        labels = _labels_for(predictions, labels)
        batch = labels.shape[0]
        classes = predictions.predicted_classes()
        self.n_samples += batch
        self.loss_sum += loss * batch
        self.task_sum += task * batch
        self.kl_sum += kl * batch
        self.correct += int(np.sum(classes == labels))
        self.true_labels.extend(labels.tolist())
        self.predicted.extend(classes.tolist())

    def update_bound(self, elbo_values: Sequence[float]) -> None:
        """Add per-sample evidence lower bounds (beta = 1) for the same samples."""
        values = np.asarray(elbo_values, dtype=np.float64)
        self.elbo_sum += float(values.sum())
        self.elbo_samples += values.shape[0]

    def summary(self) -> Dict[str, Optional[float]]:
        if self.n_samples == 0:
            raise EmptyBatchError("no evaluation batches were accumulated")
        labels = np.asarray(self.true_labels)
        return {
            "loss": self.loss_sum / self.n_samples,
            "task_loss": self.task_sum / self.n_samples,
            "kl": self.kl_sum / self.n_samples,
            "accuracy": self.correct / self.n_samples,
            "weighted_f1": float(
                f1_score(
                    labels,
                    np.asarray(self.predicted),
                    labels=np.unique(labels),
                    average="weighted",
                    zero_division=0,
                )
            ),
            "elbo": self.elbo_sum / self.elbo_samples if self.elbo_samples else None,
        }
