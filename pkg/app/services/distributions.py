"""
Categorical distributions over layer indices.

Houses the discretized reversed chi-squared prior, the uniform debugging prior,
KL divergence, and the exact marginal likelihood of the discrete-latent model
that bounds the training objective from above.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax, xlogy
from scipy.stats import chi2

from app.core.errors import DistributionError, NormalizationError, ShapeError, SupportError
from app.schemas.config import PriorFamily

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Categorical:
    """Probability vector over layer indices 1..n (stored 0-based)"""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            raise DistributionError("Categorical needs at least one outcome")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise DistributionError("Categorical probabilities must be finite and >= 0")
        if abs(probs.sum() - 1.0) > SUM_TOLERANCE:
            raise NormalizationError(
                f"Categorical probabilities sum to {probs.sum():.17g}, not 1"
            )
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        """Mode index; ties resolve to the lowest index"""
        return int(np.argmax(self.probs))

    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


@dataclass(frozen=True)
class PriorSpec:
    n_layers: int
    degrees_of_freedom: float = 3.0
    family: PriorFamily = PriorFamily.CHI2

    def __post_init__(self):
        if self.n_layers < 1:
            raise DistributionError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.family == PriorFamily.CHI2 and not self.degrees_of_freedom > 0:
            raise DistributionError(
                f"degrees of freedom must be > 0, got {self.degrees_of_freedom}"
            )


def discretized_chi2(spec: PriorSpec) -> Categorical:
    """Chi-squared density at x = 1..n, normalized, in natural index order."""
    support = np.arange(1, spec.n_layers + 1, dtype=np.float64)
    # log-space keeps large degrees of freedom (e.g. 400) from underflowing
    log_density = chi2.logpdf(support, df=spec.degrees_of_freedom)
    return Categorical(softmax(log_density))


def discretized_reversed_chi2(spec: PriorSpec) -> Categorical:
    """
    Discretized reversed chi-squared prior.

    The density is evaluated at support points x_i = i, normalized, and flipped
    so that small-x mass lands on the highest layer indices.

    Raises:
        DistributionError: If df <= 0 or n_layers == 0
    """
    return Categorical(discretized_chi2(spec).probs[::-1])


def uniform_prior(n_layers: int) -> Categorical:
    if n_layers < 1:
        raise DistributionError(f"n_layers must be >= 1, got {n_layers}")
    return Categorical(np.full(n_layers, 1.0 / n_layers))


def build_prior(spec: PriorSpec) -> Categorical:
    if spec.family == PriorFamily.UNIFORM:
        return uniform_prior(spec.n_layers)
    return discretized_reversed_chi2(spec)


def prior_pmf_rows(prior: Categorical) -> List[Tuple[int, float]]:
    """(layer_index, probability) rows with 1-based layer indices."""
    return [(i + 1, float(p)) for i, p in enumerate(prior.probs)]


def _check_lengths(a: int, b: int, what: str) -> None:
    if a != b:
        raise ShapeError(f"{what}: length mismatch ({a} vs {b})")


def kl_categorical(q: Categorical, p: Categorical) -> float:
    """
    KL(q || p) in nats, with 0 * ln(0 / p) = 0.

    Raises:
        ShapeError: If the lengths differ
        SupportError: If q has mass where p has none
    """
    _check_lengths(q.n, p.n, "kl_categorical")
    if np.any((q.probs > 0) & (p.probs == 0)):
        raise SupportError("KL is infinite: q has mass where p has none")
    safe_p = np.where(p.probs > 0, p.probs, 1.0)
    return float(np.sum(xlogy(q.probs, q.probs) - xlogy(q.probs, safe_p)))


def exact_log_marginal(prior: Categorical, per_layer_log_prob: Sequence[float]) -> float:
    """ln sum_i prior_i * exp(log_prob_i), stabilized with log-sum-exp."""
    log_prob = np.asarray(per_layer_log_prob, dtype=np.float64).reshape(-1)
    _check_lengths(prior.n, log_prob.size, "exact_log_marginal")
    support = prior.probs > 0
    return float(logsumexp(log_prob[support] + np.log(prior.probs[support])))


def true_posterior(prior: Categorical, per_layer_log_prob: Sequence[float]) -> Categorical:
    """Posterior over layers proportional to prior_i * exp(log_prob_i)."""
    log_prob = np.asarray(per_layer_log_prob, dtype=np.float64).reshape(-1)
    _check_lengths(prior.n, log_prob.size, "true_posterior")
    with np.errstate(divide="ignore"):
        logits = np.log(prior.probs) + log_prob
    posterior = softmax(logits)
    return Categorical(posterior / posterior.sum())


def elbo(q: Categorical, prior: Categorical, per_layer_log_prob: Sequence[float]) -> float:
    """E_q[log p(y | x, l)] - KL(q || prior)."""
    log_prob = np.asarray(per_layer_log_prob, dtype=np.float64).reshape(-1)
    _check_lengths(q.n, log_prob.size, "elbo")
    return float(np.dot(q.probs, log_prob)) - kl_categorical(q, prior)
