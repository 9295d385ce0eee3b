"""Tests for layer stacks, the posterior predictor, probing heads and baselines."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ConfigError, RankError, ShapeError
from app.schemas.config import LoraSettings, ModelKind, ModelSettings
from app.services.aggregation.baselines import (
    StaticWeights,
    last_layer_select,
    weighted_sum_aggregate,
)
from app.services.aggregation.heads import (
    HeadParams,
    ProbingHeadParams,
    head_forward,
    heads_forward,
    init_probing_heads,
)
from app.services.aggregation.layers import LayerStack, pool_layers, select_layers
from app.services.aggregation.lora import lora_linear
from app.services.aggregation.model_factory import ModelFactory
from app.services.aggregation.parameters import ParameterStore
from app.services.aggregation.posterior import (
    PosteriorPredictorParams,
    init_posterior_params,
    posterior_forward,
)
from app.services.autodiff import ops
from app.services.autodiff.tape import Tape, backward, named_gradients
from app.services.autodiff.tensor import Tensor
from tests.conftest import make_config


def _posterior(rng, dim=4, n_layers=3, heads=2, output_init=1.0, layer_embeddings=False):
    store = ParameterStore()
    init_posterior_params(store, dim, n_layers, heads, rng, output_init, layer_embeddings)
    return PosteriorPredictorParams.from_bound(store.bind(), heads)


class TestLayerStack:
    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            LayerStack.from_array(np.zeros((2, 3, 4)))

    def test_rejects_non_finite(self):
        data = np.zeros((1, 2, 1, 2))
        data[0, 1, 0, 0] = np.nan
        with pytest.raises(ShapeError):
            LayerStack.from_array(data)

    def test_select_drops_embedding_layer(self, random_stack):
        selected = select_layers(random_stack, include_layer0=False)
        assert selected.n_layers == 2
        np.testing.assert_array_equal(selected.states.data, random_stack.states.data[:, 1:])
        assert select_layers(random_stack, include_layer0=True) is random_stack


class TestPoolLayers:
    def test_single_frame(self, rng):
        data = rng.standard_normal((2, 3, 1, 4))
        np.testing.assert_array_equal(pool_layers(LayerStack.from_array(data)).data, data[:, :, 0])

    def test_constant_sequence(self):
        data = np.broadcast_to(np.array([1.5, -2.0, 0.25]), (1, 2, 4, 3))
        pooled = pool_layers(LayerStack.from_array(data)).data
        np.testing.assert_array_equal(pooled, np.broadcast_to([1.5, -2.0, 0.25], (1, 2, 3)))

    def test_matches_sum_oracle(self, random_stack):
        data = random_stack.states.data
        expected = sum(data[:, :, t] for t in range(5)) / 5
        np.testing.assert_allclose(pool_layers(random_stack).data, expected, atol=1e-14)


class TestPosterior:
    def test_rows_are_distributions(self, rng):
        weights = posterior_forward(Tensor(rng.standard_normal((5, 3, 4))), _posterior(rng)).data
        assert weights.shape == (5, 3)
        assert np.all(weights >= 0)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_single_layer_is_certain(self, rng):
        params = _posterior(rng, n_layers=1)
        weights = posterior_forward(Tensor(rng.standard_normal((4, 1, 4)) * 10), params).data
        np.testing.assert_array_equal(weights, np.ones((4, 1)))

    def test_identical_rows_identical_weights(self, rng):
        row = rng.standard_normal((1, 3, 4))
        weights = posterior_forward(Tensor(np.concatenate([row, row])), _posterior(rng)).data
        np.testing.assert_allclose(weights[0], weights[1], atol=1e-15, rtol=0)

    def test_permutation_equivariance(self, rng):
        params = _posterior(rng, dim=6, n_layers=5, heads=3)
        pooled = rng.standard_normal((3, 5, 6))
        perm = np.array([3, 0, 4, 1, 2])
        base = posterior_forward(Tensor(pooled), params).data
        permuted = posterior_forward(Tensor(pooled[:, perm]), params).data
        # key-axis sums (softmax normalizer, attention @ v) run in permuted order,
        # so rows agree up to float summation order, not bit for bit
        np.testing.assert_allclose(permuted, base[:, perm], atol=1e-12, rtol=0)

    def test_layer_embeddings_break_equivariance(self, rng):
        params = _posterior(rng, dim=4, n_layers=3, layer_embeddings=True)
        embedding = rng.standard_normal((3, 4))
        params = PosteriorPredictorParams(
            **{**params.__dict__, "layer_embedding": Tensor(embedding)}
        )
        pooled = rng.standard_normal((1, 3, 4))
        perm = np.array([2, 0, 1])
        base = posterior_forward(Tensor(pooled), params).data
        permuted = posterior_forward(Tensor(pooled[:, perm]), params).data
        assert not np.allclose(permuted, base[:, perm])

    def test_dim_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            posterior_forward(Tensor(np.zeros((1, 3, 6))), _posterior(rng))

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ShapeError):
            init_posterior_params(ParameterStore(), 5, 3, 2, rng)


class TestProbingHeads:
    def test_zero_final_layer_gives_uniform_classes(self, random_stack, rng):
        store = ParameterStore()
        init_probing_heads(store, 3, 4, 6, 5, rng, zero_final=True)
        logits = heads_forward(random_stack, ProbingHeadParams.from_bound(store.bind(), 3, "relu"))
        assert logits.shape == (2, 3, 5)
        np.testing.assert_array_equal(logits.data, 0.0)

    def test_head_matches_matrix_oracle(self, rng):
        x = rng.standard_normal((3, 4))
        w1, b1 = rng.standard_normal((4, 5)), rng.standard_normal(5)
        w2, b2 = rng.standard_normal((5, 2)), rng.standard_normal(2)
        head = HeadParams(Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2))
        expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
        np.testing.assert_allclose(head_forward(Tensor(x), head).data, expected, atol=1e-12)

    def test_linear_head_when_hidden_is_zero(self, rng):
        store = ParameterStore()
        init_probing_heads(store, 2, 4, 0, 3, rng)
        assert "heads.0.w2" not in store
        assert store["heads.1.w1"].shape == (4, 3)

    def test_head_sees_only_its_layer(self, random_stack, rng):
        store = ParameterStore()
        init_probing_heads(store, 3, 4, 6, 2, rng)
        params = ProbingHeadParams.from_bound(store.bind(), 3, "tanh")
        changed = random_stack.states.numpy()
        changed[:, 1] += 3.0
        before = heads_forward(random_stack, params).data
        after = heads_forward(LayerStack.from_array(changed), params).data
        np.testing.assert_array_equal(before[:, [0, 2]], after[:, [0, 2]])
        assert not np.allclose(before[:, 1], after[:, 1])

    def test_head_count_must_match_layers(self, random_stack, rng):
        store = ParameterStore()
        init_probing_heads(store, 2, 4, 0, 2, rng)
        with pytest.raises(ShapeError):
            heads_forward(random_stack, ProbingHeadParams.from_bound(store.bind(), 2, "relu"))


class TestBaselines:
    def test_one_hot_selects_layer(self, random_stack):
        for j in range(3):
            out = weighted_sum_aggregate(random_stack, StaticWeights.one_hot(3, j)).data
            np.testing.assert_array_equal(out, random_stack.states.data[:, j])

    def test_uniform_mean_of_two_layers(self):
        stack = LayerStack.from_array(np.array([2.0, 4.0]).reshape(1, 2, 1, 1))
        out = weighted_sum_aggregate(stack, StaticWeights.uniform(2)).data
        np.testing.assert_array_equal(out, [[[3.0]]])

    def test_matches_sum_oracle(self, random_stack, rng):
        logits = rng.standard_normal(3)
        w = np.exp(logits) / np.exp(logits).sum()
        expected = sum(w[i] * random_stack.states.data[:, i] for i in range(3))
        out = weighted_sum_aggregate(random_stack, StaticWeights(Tensor(logits))).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_one_hot_last_equals_last_layer(self, random_stack):
        np.testing.assert_array_equal(
            weighted_sum_aggregate(random_stack, StaticWeights.one_hot(3, 2)).data,
            last_layer_select(random_stack).data,
        )

    def test_last_layer_single(self, rng):
        data = rng.standard_normal((2, 1, 3, 4))
        np.testing.assert_array_equal(last_layer_select(LayerStack.from_array(data)).data, data[:, 0])

    def test_weight_count_mismatch(self, random_stack):
        with pytest.raises(ShapeError):
            weighted_sum_aggregate(random_stack, StaticWeights.uniform(4))


class TestLora:
    def test_zero_adapter_equals_base(self, rng):
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        out = lora_linear(x, w, np.zeros((4, 2)), rng.standard_normal((2, 5)), scale=2.0)
        np.testing.assert_array_equal(out.data, (x @ w))

    def test_rank_one_hand_example(self):
        effective = lora_linear(np.eye(2), np.eye(2), [[1.0], [0.0]], [[0.0, 1.0]], 1.0)
        np.testing.assert_array_equal(effective.data, [[1.0, 1.0], [0.0, 1.0]])

    def test_rank_outside_range(self, rng):
        with pytest.raises(RankError):
            lora_linear(np.ones((1, 2)), np.eye(2), np.ones((2, 3)), np.ones((3, 2)))

    def test_factor_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lora_linear(np.ones((1, 2)), np.eye(2), np.ones((3, 1)), np.ones((1, 2)))

    def test_base_is_absent_from_gradient_map(self, rng):
        tape = Tape()
        w = tape.watch(rng.standard_normal((4, 5)), name="w")
        a = tape.watch(rng.standard_normal((4, 2)), name="lora_a")
        b = tape.watch(rng.standard_normal((2, 5)), name="lora_b")
        out = lora_linear(rng.standard_normal((3, 4)), w, a, b, scale=0.5)
        grads = backward(ops.sum_all(out), tape)
        assert w.node not in grads
        assert a.node in grads and b.node in grads
        named = named_gradients(grads, tape)
        np.testing.assert_array_equal(named["w"], np.zeros((4, 5)))
        assert np.any(named["lora_a"] != 0) and np.any(named["lora_b"] != 0)

    def test_lora_model_gradients_skip_backbone_base(self, tmp_path, stored_batch):
        config = make_config(
            tmp_path,
            model=ModelSettings(head_hidden=8, attention_heads=2, lora=LoraSettings(enabled=True, rank=2)),
        )
        model = ModelFactory.create(config, ModelKind.VARAN)
        stacks, labels = stored_batch
        tape = Tape()
        output = model.forward(stacks, tape)
        named = named_gradients(backward(model.loss(output, labels).total, tape), tape)
        assert set(named) == set(model.store.trainable_names)
        assert not any(name.endswith((".w", ".b", "embedding")) for name in named if name.startswith("backbone."))
        assert "backbone.0.lora_b" in named


class TestModels:
    def test_varan_forward_shapes(self, tiny_config, stored_batch):
        stacks, labels = stored_batch
        model = ModelFactory.create(tiny_config, ModelKind.VARAN)
        output = model.forward(stacks)
        assert output.weights.shape == (5, 4)
        assert output.per_layer_log_probs.shape == (5, 4, 3)
        loss, task, kl = model.loss(output, labels).values()
        assert math.isfinite(loss) and kl >= 0

    def test_untrained_weights_are_near_uniform(self, tiny_config, stored_batch):
        model = ModelFactory.create(tiny_config, ModelKind.VARAN)
        weights = model.forward(stored_batch[0]).weights.data
        assert np.all(weights.max(axis=1) - weights.min(axis=1) < 0.1)

    def test_last_layer_weights_are_one_hot(self, tiny_config, stored_batch):
        output = ModelFactory.create(tiny_config, ModelKind.LAST_LAYER).forward(stored_batch[0])
        np.testing.assert_array_equal(output.weights.data[:, -1], 1.0)
        assert output.weights.data[:, :-1].sum() == 0.0

    def test_weighted_sum_starts_uniform(self, tiny_config, stored_batch):
        output = ModelFactory.create(tiny_config, ModelKind.WEIGHTED_SUM).forward(stored_batch[0])
        np.testing.assert_allclose(output.weights.data, 0.25)

    def test_include_layer0_adds_a_layer(self, tmp_path, stored_batch):
        config = make_config(tmp_path, model=ModelSettings(head_hidden=8, attention_heads=2, include_layer0=True))
        output = ModelFactory.create(config, ModelKind.VARAN).forward(stored_batch[0])
        assert output.weights.shape == (5, 5)

    def test_wrong_stack_shape(self, tiny_config, rng):
        model = ModelFactory.create(tiny_config, ModelKind.VARAN)
        with pytest.raises(ShapeError):
            model.forward(rng.standard_normal((2, 4, 3, 8)))

    def test_parameter_names_are_stable(self, tiny_config):
        store = ModelFactory.create(tiny_config, ModelKind.VARAN).store
        assert "posterior.w_q" in store
        assert "heads.3.w2" in store
        assert "static.logits" in ModelFactory.create(tiny_config, ModelKind.WEIGHTED_SUM).store

    def test_same_seed_same_init(self, tiny_config):
        a = ModelFactory.create(tiny_config, ModelKind.VARAN).store
        b = ModelFactory.create(tiny_config, ModelKind.VARAN).store
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_lora_mode_freezes_base(self, tmp_path, stored_batch):
        config = make_config(
            tmp_path,
            model=ModelSettings(
                head_hidden=8, attention_heads=2, lora=LoraSettings(enabled=True, rank=2)
            ),
        )
        store = ModelFactory.create(config, ModelKind.VARAN).store
        assert "backbone.0.w" in store.frozen_names
        assert "backbone.embedding" in store.frozen_names
        assert "backbone.3.lora_a" in store.trainable_names

    def test_finetune_mode_trains_blocks_not_embedding(self, tmp_path, stored_batch):
        config = make_config(
            tmp_path, model=ModelSettings(head_hidden=8, attention_heads=2, finetune_backbone=True)
        )
        model = ModelFactory.create(config, ModelKind.VARAN)
        assert model.store.frozen_names == ("backbone.embedding",)
        assert "backbone.0.lora_a" not in model.store
        stacks, labels = stored_batch
        tape = Tape()
        output = model.forward(stacks, tape)
        named = named_gradients(backward(model.loss(output, labels).total, tape), tape)
        for k in range(config.synth.n_layers):
            assert np.any(named[f"backbone.{k}.w"] != 0)
            assert np.any(named[f"backbone.{k}.b"] != 0)

    def test_finetune_and_lora_are_exclusive(self):
        with pytest.raises(ValidationError):
            ModelSettings(finetune_backbone=True, lora=LoraSettings(enabled=True))


    def test_unknown_kind(self, tiny_config):
        with pytest.raises(ConfigError):
            ModelFactory.model_class("mixture")
