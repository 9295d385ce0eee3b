import logging
from typing import Dict, Optional, Type

import numpy as np

from app.core.errors import ConfigError
from app.schemas.config import BackboneMode, ModelKind, RunConfig
from app.services.aggregation.models import (
    AggregationModel,
    LastLayerModel,
    VaranModel,
    WeightedSumModel,
)
from app.services.aggregation.parameters import ParameterStore
from app.services.synthdata.backbone import init_backbone

logger = logging.getLogger(__name__)

# Stream tags for np.random.default_rng([seed, tag])
BACKBONE_STREAM = 1
MODEL_STREAM = 2


class ModelFactory:
    """
    Factory class for building aggregation models from a run configuration.

    Every random draw comes from the run seed. The toy backbone uses its own
    stream, so all model kinds of one run start from identical base weights.
    """

    _registry: Dict[ModelKind, Type[AggregationModel]] = {
        ModelKind.VARAN: VaranModel,
        ModelKind.WEIGHTED_SUM: WeightedSumModel,
        ModelKind.LAST_LAYER: LastLayerModel,
    }

    @staticmethod
    def model_class(kind: ModelKind) -> Type[AggregationModel]:
        try:
            return ModelFactory._registry[ModelKind(kind)]
        except (KeyError, ValueError) as e:
            raise ConfigError(f"Unknown model kind: {kind}") from e

    @staticmethod
    def create(config: RunConfig, kind: Optional[ModelKind] = None) -> AggregationModel:
        """
        Build a freshly initialized model.

        Args:
            config: Run configuration
            kind: Model kind; defaults to ``config.model.kind``

        Returns:
            An AggregationModel with a new parameter store
        """
        kind = ModelKind(kind or config.model.kind)
        model_cls = ModelFactory.model_class(kind)
        store = ParameterStore()

        mode = config.model.backbone_mode
        if mode != BackboneMode.FROZEN:
            init_backbone(
                store,
                n_layers=config.synth.n_layers,
                dim=config.synth.dim,
                rng=np.random.default_rng([config.seed, BACKBONE_STREAM]),
                lora_rank=config.model.lora.rank if mode == BackboneMode.LORA else None,
                trainable_base=mode == BackboneMode.FINETUNE,
            )
        model_cls.init_parameters(store, config, np.random.default_rng([config.seed, MODEL_STREAM]))
        logger.info(
            f"Created {kind.value} model with {store.count()} trainable parameters"
            f" ({mode.value} backbone)"
        )
        return model_cls(config, store)

    @staticmethod
    def from_store(kind: ModelKind, config: RunConfig, store: ParameterStore) -> AggregationModel:
        """Wrap an existing parameter store (e.g. one loaded from a checkpoint)."""
        return ModelFactory.model_class(kind)(config, store)
