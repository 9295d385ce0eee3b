"""Tests for the training objective and the inference rule."""

import math

import numpy as np
import pytest

from app.core.errors import LabelError, NormalizationError, ShapeError
from app.services.autodiff.tensor import Tensor
from app.services.distributions import Categorical, elbo
from app.services.objective import (
    combine_inference,
    cross_entropy_loss,
    per_sample_bound_terms,
    varan_loss,
)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@pytest.fixture
def tiny_instance(rng):
    weights = rng.dirichlet(np.ones(3), size=2)
    per_layer = _log_softmax(rng.standard_normal((2, 3, 2)))
    labels = np.array([1, 0])
    prior = Categorical(np.array([0.2, 0.3, 0.5]))
    return weights, per_layer, labels, prior


class TestVaranLoss:
    def test_matches_double_sum(self, tiny_instance):
        weights, per_layer, labels, prior = tiny_instance
        beta = 0.05
        task = 0.0
        kl = 0.0
        for b in range(2):
            for i in range(3):
                task -= weights[b, i] * per_layer[b, i, labels[b]]
                kl += weights[b, i] * math.log(weights[b, i] / prior.probs[i])
        breakdown = varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, beta)
        assert breakdown.expected_task_loss.item() == pytest.approx(task / 2, abs=1e-12)
        assert breakdown.kl_term.item() == pytest.approx(kl / 2, abs=1e-12)
        assert breakdown.total.item() == pytest.approx(task / 2 + beta * kl / 2, abs=1e-12)

    def test_prior_weights_have_zero_kl(self, tiny_instance):
        _, per_layer, labels, prior = tiny_instance
        weights = np.tile(prior.probs, (2, 1))
        breakdown = varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, 1.0)
        assert abs(breakdown.kl_term.item()) <= 1e-15

    def test_single_layer_reduces_to_cross_entropy(self, rng):
        per_layer = _log_softmax(rng.standard_normal((4, 1, 3)))
        labels = np.array([0, 2, 1, 1])
        breakdown = varan_loss(
            Tensor(np.ones((4, 1))), Tensor(per_layer), labels, Categorical([1.0]), 0.3
        )
        plain = cross_entropy_loss(Tensor(per_layer[:, 0]), labels)
        assert breakdown.kl_term.item() == 0.0
        assert breakdown.total.item() == pytest.approx(plain.total.item(), abs=1e-15)

    def test_one_hot_posterior_without_kl_is_selected_head_cross_entropy(self, rng):
        per_layer = _log_softmax(rng.standard_normal((2, 3, 4)))
        labels = np.array([3, 1])
        prior = Categorical(np.array([0.2, 0.3, 0.5]))
        for j in range(3):
            weights = np.zeros((2, 3))
            weights[:, j] = 1.0
            breakdown = varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, 0.0)
            plain = cross_entropy_loss(Tensor(per_layer[:, j]), labels)
            assert breakdown.total.item() == plain.total.item()

    def test_total_is_affine_in_beta(self, tiny_instance):
        weights, per_layer, labels, prior = tiny_instance
        betas = [0.0, 0.01, 0.05, 0.1, 1.0, 4.0]
        totals = [
            varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, beta).total.item()
            for beta in betas
        ]
        base = varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, 0.0)
        kl = base.kl_term.item()
        assert kl >= 0
        for beta, total in zip(betas, totals):
            assert total == pytest.approx(base.expected_task_loss.item() + beta * kl, abs=1e-12)
        assert totals == sorted(totals)

    def test_unnormalized_rows_raise(self, tiny_instance):
        _, per_layer, labels, prior = tiny_instance
        weights = np.full((2, 3), 0.34)
        with pytest.raises(NormalizationError):
            varan_loss(Tensor(weights), Tensor(per_layer), labels, prior, 0.1)

    def test_invalid_label(self, tiny_instance):
        weights, per_layer, _, prior = tiny_instance
        with pytest.raises(LabelError):
            varan_loss(Tensor(weights), Tensor(per_layer), [0, 2], prior, 0.1)

    def test_prior_length_mismatch(self, tiny_instance):
        weights, per_layer, labels, _ = tiny_instance
        with pytest.raises(ShapeError):
            varan_loss(Tensor(weights), Tensor(per_layer), labels, Categorical([0.5, 0.5]), 0.1)

    def test_bound_terms_match_elbo(self, tiny_instance):
        weights, per_layer, labels, prior = tiny_instance
        task, kl = per_sample_bound_terms(weights, per_layer, labels, prior)
        for b in range(2):
            expected = elbo(Categorical(weights[b]), prior, per_layer[b, :, labels[b]])
            assert -(task[b] + kl[b]) == pytest.approx(expected, abs=1e-12)


class TestCombineInference:
    def test_one_hot_selects_head(self, rng):
        per_layer = _log_softmax(rng.standard_normal((3, 4, 5)))
        for j in range(4):
            weights = np.zeros((3, 4))
            weights[:, j] = 1.0
            prediction = combine_inference(Tensor(weights), Tensor(per_layer))
            np.testing.assert_array_equal(prediction.combined_log_scores.data, per_layer[:, j])

    def test_midpoint(self):
        per_layer = np.array([[[-1.0, -0.5], [-3.0, -0.1]]])
        prediction = combine_inference(Tensor([[0.5, 0.5]]), Tensor(per_layer))
        assert prediction.combined_log_scores.data[0, 0] == -2.0

    def test_matches_sum_oracle_and_renormalize_keeps_argmax(self, rng):
        weights = rng.dirichlet(np.ones(4), size=6)
        per_layer = _log_softmax(rng.standard_normal((6, 4, 3)) * 3)
        expected = np.einsum("bn,bnc->bc", weights, per_layer)
        raw = combine_inference(Tensor(weights), Tensor(per_layer))
        calibrated = combine_inference(Tensor(weights), Tensor(per_layer), renormalize=True)
        np.testing.assert_allclose(raw.combined_log_scores.data, expected, atol=1e-12)
        np.testing.assert_array_equal(raw.predicted_classes(), calibrated.predicted_classes())
        np.testing.assert_allclose(
            np.exp(calibrated.combined_log_scores.data).sum(axis=1), 1.0, atol=1e-12
        )
        assert calibrated.renormalized and not raw.renormalized

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            combine_inference(Tensor(np.full((2, 3), 1 / 3)), Tensor(np.zeros((2, 4, 2))))
