import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ShapeError
from app.schemas.config import BackboneMode, ModelKind, RunConfig
from app.services.aggregation.baselines import (
    StaticWeights,
    last_layer_select,
    weighted_sum_aggregate,
)
from app.services.aggregation.heads import (
    ProbingHeadParams,
    head_forward,
    head_params_from_bound,
    heads_forward,
    init_head_params,
    init_probing_heads,
)
from app.services.aggregation.layers import LayerStack, pool_layers, select_layers
from app.services.aggregation.parameters import ParameterStore
from app.services.aggregation.posterior import (
    PREFIX as POSTERIOR_PREFIX,
    PosteriorPredictorParams,
    init_posterior_params,
    posterior_forward,
)
from app.services.autodiff import ops
from app.services.autodiff.tape import Tape
from app.services.autodiff.tensor import Tensor
from app.services.distributions import Categorical, PriorSpec, build_prior
from app.services.objective import (
    LossBreakdown,
    Prediction,
    combine_inference,
    cross_entropy_loss,
    per_sample_bound_terms,
    varan_loss,
)
from app.services.synthdata.backbone import BackboneParams, refine_stack

logger = logging.getLogger(__name__)

STATIC_LOGITS = "static.logits"
SINGLE_HEAD = "head"
# Parameters that produce layer weights; the optimizer scales their lr
WEIGHTING_PREFIXES = (f"{POSTERIOR_PREFIX}.", "static.")


@dataclass(frozen=True)
class ModelOutput:
    """
    Forward-pass results for one batch.

    ``per_layer_log_probs`` is set for VARAN; the static baselines produce a
    single ``log_probs`` matrix from their one head.
    """

    weights: Tensor
    per_layer_log_probs: Optional[Tensor] = None
    log_probs: Optional[Tensor] = None


class AggregationModel(ABC):
    """
    Base class for layer aggregation models.

    A model owns a ParameterStore and reads every tensor from it through
    ``bind`` at the start of each forward pass, so one tape per step sees
    exactly the trainable parameters.
    """

    kind: ModelKind

    def __init__(self, config: RunConfig, store: ParameterStore):
        self.config = config
        self.store = store
        self.n_layers = config.model_layers
        self.dim = config.synth.dim
        self.n_classes = config.synth.n_classes

    @classmethod
    @abstractmethod
    def init_parameters(cls, store: ParameterStore, config: RunConfig, rng: np.random.Generator) -> None:
        """Register this kind's parameters in ``store``."""
        pass

    @abstractmethod
    def _forward(self, stack: LayerStack, bound: dict) -> ModelOutput:
        pass

    @abstractmethod
    def loss(self, output: ModelOutput, labels: Sequence[int]) -> LossBreakdown:
        pass

    @abstractmethod
    def predict(self, output: ModelOutput, renormalize: bool = False) -> Prediction:
        pass

    def bound_terms(self, output: ModelOutput, labels: Sequence[int]) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Per-sample (task loss, KL) at beta = 1, or None when the model has no layer posterior."""
        return None

    def prepare_stack(self, stored: Any, bound: dict) -> LayerStack:
        """Stored (h_0..h_n) stack -> the layers this model aggregates."""
        stack = stored if isinstance(stored, LayerStack) else LayerStack.from_array(stored)
        settings = self.config.model
        mode = settings.backbone_mode
        if mode != BackboneMode.FROZEN:
            backbone = BackboneParams.from_bound(
                bound,
                self.config.synth.n_layers,
                lora_scale=settings.lora.scale,
                trainable_base=mode == BackboneMode.FINETUNE,
            )
            stack = refine_stack(stack, backbone)
        return select_layers(stack, self.config.model.include_layer0)

    def forward(self, stored: Any, tape: Optional[Tape] = None) -> ModelOutput:
        """
        Run the model on a batch of stored stacks.

        Args:
            stored: (b, n + 1, s, d) array or LayerStack holding h_0..h_n
            tape: Tape for trainable parameters; None for inference

        Returns:
            ModelOutput with layer weights and log-probabilities
        """
        bound = self.store.bind(tape)
        stack = self.prepare_stack(stored, bound)
        if stack.n_layers != self.n_layers or stack.dim != self.dim:
            raise ShapeError(
                f"{self.kind.value} model expects {self.n_layers} layers of dim {self.dim}",
                [stack.states.shape],
            )
        return self._forward(stack, bound)

    def _pooled_head_log_probs(self, features: Tensor, bound: dict) -> Tensor:
        pooled = ops.mean_axis(features, axis=1)
        head = head_params_from_bound(bound, SINGLE_HEAD)
        logits = head_forward(pooled, head, self.config.model.head_activation)
        return ops.log_softmax_axis(logits, axis=-1)


class VaranModel(AggregationModel):
    """Posterior predictor over layers plus one probing head per layer."""

    kind = ModelKind.VARAN

    def __init__(self, config: RunConfig, store: ParameterStore):
        super().__init__(config, store)
        objective = config.objective
        self.prior: Categorical = build_prior(
            PriorSpec(
                n_layers=self.n_layers,
                degrees_of_freedom=objective.prior_df,
                family=objective.prior_family,
            )
        )
        self.beta = objective.beta

    @classmethod
    def init_parameters(cls, store: ParameterStore, config: RunConfig, rng: np.random.Generator) -> None:
        model = config.model
        init_posterior_params(
            store,
            dim=config.synth.dim,
            n_layers=config.model_layers,
            heads=model.attention_heads,
            rng=rng,
            output_init=model.posterior_output_init,
            layer_embeddings=model.layer_embeddings,
        )
        init_probing_heads(
            store,
            n_layers=config.model_layers,
            dim=config.synth.dim,
            hidden=model.head_hidden,
            n_classes=config.synth.n_classes,
            rng=rng,
        )

    def _forward(self, stack: LayerStack, bound: dict) -> ModelOutput:
        settings = self.config.model
        posterior = PosteriorPredictorParams.from_bound(
            bound, settings.attention_heads, residual=settings.posterior_residual
        )
        weights = posterior_forward(pool_layers(stack), posterior)
        heads = ProbingHeadParams.from_bound(bound, self.n_layers, settings.head_activation)
        per_layer = ops.log_softmax_axis(heads_forward(stack, heads), axis=-1)
        return ModelOutput(weights=weights, per_layer_log_probs=per_layer)

    def loss(self, output: ModelOutput, labels: Sequence[int]) -> LossBreakdown:
        return varan_loss(output.weights, output.per_layer_log_probs, labels, self.prior, self.beta)

    def predict(self, output: ModelOutput, renormalize: bool = False) -> Prediction:
        return combine_inference(output.weights, output.per_layer_log_probs, renormalize)

    def bound_terms(self, output: ModelOutput, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        return per_sample_bound_terms(
            output.weights.data, output.per_layer_log_probs.data, labels, self.prior
        )


class _SingleHeadModel(AggregationModel):
    """Shared loss and prediction for baselines with one classifier head."""

    def loss(self, output: ModelOutput, labels: Sequence[int]) -> LossBreakdown:
        return cross_entropy_loss(output.log_probs, labels)

    def predict(self, output: ModelOutput, renormalize: bool = False) -> Prediction:
        # log_probs rows are already normalized
        return Prediction(
            combined_log_scores=output.log_probs,
            weights=output.weights,
            renormalized=renormalize,
        )


class WeightedSumModel(_SingleHeadModel):
    """One learned weight vector shared by all inputs, then a single head."""

    kind = ModelKind.WEIGHTED_SUM

    @classmethod
    def init_parameters(cls, store: ParameterStore, config: RunConfig, rng: np.random.Generator) -> None:
        store.add(STATIC_LOGITS, np.zeros(config.model_layers))
        init_head_params(
            store,
            SINGLE_HEAD,
            dim=config.synth.dim,
            hidden=config.model.head_hidden,
            n_classes=config.synth.n_classes,
            rng=rng,
        )

    def _forward(self, stack: LayerStack, bound: dict) -> ModelOutput:
        static = StaticWeights(bound[STATIC_LOGITS])
        combined = weighted_sum_aggregate(stack, static)
        weights = np.broadcast_to(static.normalized().data, (stack.batch, stack.n_layers))
        return ModelOutput(
            weights=Tensor(weights),
            log_probs=self._pooled_head_log_probs(combined, bound),
        )


class LastLayerModel(_SingleHeadModel):
    """Top layer only, then a single head."""

    kind = ModelKind.LAST_LAYER

    @classmethod
    def init_parameters(cls, store: ParameterStore, config: RunConfig, rng: np.random.Generator) -> None:
        init_head_params(
            store,
            SINGLE_HEAD,
            dim=config.synth.dim,
            hidden=config.model.head_hidden,
            n_classes=config.synth.n_classes,
            rng=rng,
        )

    def _forward(self, stack: LayerStack, bound: dict) -> ModelOutput:
        weights = np.zeros((stack.batch, stack.n_layers))
        weights[:, -1] = 1.0
        return ModelOutput(
            weights=Tensor(weights),
            log_probs=self._pooled_head_log_probs(last_layer_select(stack), bound),
        )
