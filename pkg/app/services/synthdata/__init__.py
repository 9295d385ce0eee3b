from app.services.synthdata.backbone import (
    BackboneParams,
    init_backbone,
    refine_stack,
    toy_backbone_forward,
)
from app.services.synthdata.generator import (
    SynthDataset,
    SynthSample,
    SynthSplit,
    generate_dataset,
    informative_layer,
)
from app.services.synthdata.oracle import oracle_probe_accuracy

__all__ = [
    "BackboneParams",
    "SynthDataset",
    "SynthSample",
    "SynthSplit",
    "generate_dataset",
    "informative_layer",
    "init_backbone",
    "oracle_probe_accuracy",
    "refine_stack",
    "toy_backbone_forward",
]
