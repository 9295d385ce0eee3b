"""
Training objective and inference rule.

The task term is the exact expectation over the layer posterior (a full sum
over layers, no sampling), so gradients reach the posterior weights directly:

    L = -mean_b sum_i w_i * log p(y | x, l=i) + beta * mean_b KL(w || prior)
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NormalizationError, ShapeError
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor, as_tensor
from app.services.distributions import Categorical

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LossBreakdown:
    total: Tensor
    expected_task_loss: Tensor
    kl_term: Tensor
    beta: float

    def values(self) -> Tuple[float, float, float]:
        """(total, task, kl) as floats"""
        return self.total.item(), self.expected_task_loss.item(), self.kl_term.item()


@dataclass(frozen=True)
class Prediction:
    """
    combined_log_scores (b, C): weighted sum of per-layer log-probabilities.

    Rows are log-scores, not normalized log-probabilities, unless
    ``renormalized`` is set.
    """

    combined_log_scores: Tensor
    weights: Tensor
    per_layer_log_probs: Optional[Tensor] = None
    renormalized: bool = False

    def predicted_classes(self) -> np.ndarray:
        """Row argmax; ties resolve to the lowest class index"""
        return np.argmax(self.combined_log_scores.data, axis=1)


def check_weight_rows(weights: Tensor) -> None:
    """Raise if any row is negative or does not sum to one within 1e-9."""
    w = weights.data
    if w.ndim != 2:
        raise ShapeError("weights must be (b, n)", [w.shape])
    if np.any(w < 0):
        raise NormalizationError("layer weights contain negative entries")
    deviation = np.max(np.abs(w.sum(axis=1) - 1.0)) if w.size else 0.0
    if deviation > ROW_SUM_TOLERANCE:
        raise NormalizationError(
            f"layer weight rows deviate from 1 by {deviation:.3e}; upstream softmax is broken"
        )


def _check_conformance(weights: Tensor, per_layer_log_probs: Tensor) -> None:
    if per_layer_log_probs.ndim != 3 or per_layer_log_probs.shape[:2] != weights.shape:
        raise ShapeError(
            "weights (b, n) and per-layer log-probs (b, n, C) do not conform",
            [weights.shape, per_layer_log_probs.shape],
        )


def varan_loss(
    weights: Tensor,
    per_layer_log_probs: Tensor,
    labels: Sequence[int],
    prior: Categorical,
    beta: float,
) -> LossBreakdown:
    """
    Beta-weighted negative evidence lower bound, averaged over the batch.

    Args:
        weights: Posterior rows q(l | x), shape (b, n)
        per_layer_log_probs: log p(y | x, l=i) for every class, shape (b, n, C)
        labels: Class index per sample
        prior: Prior over the n layers
        beta: KL scale

    Raises:
        NormalizationError: If a weight row is not a distribution
        LabelError: If a label is outside [0, C)
    """
    weights, per_layer_log_probs = as_tensor(weights), as_tensor(per_layer_log_probs)
    check_weight_rows(weights)
    _check_conformance(weights, per_layer_log_probs)
    if prior.n != weights.shape[1]:
        raise ShapeError("prior length differs from layer count", [(prior.n,), weights.shape])

    batch = weights.shape[0]
    label_log_probs = ops.gather_last(per_layer_log_probs, labels)  # (b, n)
    expected = ops.sum_all(ops.mul(weights, label_log_probs))
    task = ops.mul(expected, -1.0 / batch)
    kl = ops.mul(ops.sum_all(ops.kl_rows(weights, prior.probs)), 1.0 / batch)
    total = ops.add(task, ops.mul(kl, beta))
    return LossBreakdown(total=total, expected_task_loss=task, kl_term=kl, beta=beta)


def cross_entropy_loss(log_probs: Tensor, labels: Sequence[int]) -> LossBreakdown:
    """Mean negative log-likelihood for the static baselines (no KL term)."""
    log_probs = as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ShapeError("log-probs must be (b, C)", [log_probs.shape])
    batch = log_probs.shape[0]
    task = ops.mul(ops.sum_all(ops.gather_last(log_probs, labels)), -1.0 / batch)
    return LossBreakdown(total=task, expected_task_loss=task, kl_term=Tensor(0.0), beta=0.0)


def per_sample_bound_terms(
    weights: np.ndarray,
    per_layer_log_probs: np.ndarray,
    labels: Sequence[int],
    prior: Categorical,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample (task loss, KL) with beta = 1; -(task + kl) is each sample's ELBO."""
    w = np.asarray(weights, dtype=np.float64)
    lp = np.asarray(per_layer_log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    label_lp = lp[np.arange(lp.shape[0]), :, labels]
    task = -(w * label_lp).sum(axis=1)
    kl = ops.kl_rows(Tensor(w), prior.probs).numpy()
    return task, kl


def combine_inference(
    weights: Tensor, per_layer_log_probs: Tensor, renormalize: bool = False
) -> Prediction:
    """
    Weighted sum of per-layer log-probabilities.

    With ``renormalize`` the rows are shifted by their log-sum-exp so they
    become calibrated log-probabilities; the argmax is unaffected.
    """
    weights, per_layer_log_probs = as_tensor(weights), as_tensor(per_layer_log_probs)
    _check_conformance(weights, per_layer_log_probs)
    check_weight_rows(weights)
    b, n, c = per_layer_log_probs.shape
    row_weights = ops.reshape(weights, (b, 1, n))
    scores = ops.reshape(ops.matmul(row_weights, per_layer_log_probs), (b, c))
    if renormalize:
        scores = ops.log_softmax_axis(scores, axis=1)
    return Prediction(
        combined_log_scores=scores,
        weights=weights,
        per_layer_log_probs=per_layer_log_probs,
        renormalized=renormalize,
    )
