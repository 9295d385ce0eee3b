from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Task(str, Enum):
    """CLI subcommands that consume a run configuration"""

    GEN_DATA = "gen-data"
    TRAIN = "train"
    EVAL = "eval"
    COMPARE = "compare"
    PLOT_PRIOR = "plot-prior"
    GRAD_CHECK = "grad-check"
    EXPORT_WEIGHTS = "export-weights"
    SWEEP = "sweep"


class ModelKind(str, Enum):
    """Layer aggregation strategies"""

    VARAN = "varan"
    WEIGHTED_SUM = "weighted_sum"
    LAST_LAYER = "last_layer"


class BackboneMode(str, Enum):
    """How the toy backbone is trained in front of the aggregation model"""

    FROZEN = "frozen"
    FINETUNE = "finetune"
    LORA = "lora"


class PriorFamily(str, Enum):
    CHI2 = "discretized-reversed-chi2"
    UNIFORM = "uniform"


class SectionModel(BaseModel):
    """Base for config sections: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SplitSizes(SectionModel):
    train: int = Field(4000, ge=1)
    val: int = Field(500, ge=1)
    test: int = Field(1000, ge=1)


class SynthSpec(SectionModel):
    """Regime-switching benchmark definition"""

    n_layers: int = Field(6, ge=2, description="Encoder layers (h_1..h_n)")
    dim: int = Field(32, ge=1)
    seq_len: int = Field(8, ge=1)
    n_classes: int = Field(4, ge=2)
    n_regimes: int = Field(3, ge=1)
    signal_strength: float = Field(2.0, ge=0.0)
    noise_sigma: float = Field(1.0, gt=0.0)
    marker_strength: float = Field(1.0, ge=0.0)
    distractor_strength: float = Field(
        1.0,
        ge=0.0,
        description="Scale of the label-independent class mean on non-informative layers",
    )
    samples_per_split: SplitSizes = Field(default_factory=SplitSizes)
    seed: Optional[int] = Field(
        None, ge=0, lt=2**64, description="Defaults to the run seed"
    )

    @model_validator(mode="after")
    def check_regimes(self) -> "SynthSpec":
        if self.n_regimes > self.n_layers:
            raise ValueError(
                f"n_regimes ({self.n_regimes}) must not exceed n_layers ({self.n_layers})"
            )
        return self


class LoraSettings(SectionModel):
    enabled: bool = False
    rank: int = Field(16, ge=1, description="Adapter rank; searched over 8, 16, 32")
    scale: float = 1.0


class ModelSettings(SectionModel):
    kind: ModelKind = ModelKind.VARAN
    head_hidden: int = Field(
        256, ge=0, description="Probing head hidden size; 0 means a single linear layer"
    )
    head_activation: Literal["relu", "tanh"] = "relu"
    attention_heads: int = Field(4, ge=1)
    include_layer0: bool = False
    layer_embeddings: bool = False
    posterior_residual: bool = Field(
        True, description="Add the pooled tokens back onto the attention output"
    )
    posterior_output_init: float = Field(
        0.01,
        ge=0.0,
        description="Init range multiplier for the posterior d->1 projection",
    )
    finetune_backbone: bool = Field(
        False,
        description="Train the toy backbone block weights; the embedding stays frozen",
    )
    lora: LoraSettings = Field(default_factory=LoraSettings)

    @model_validator(mode="after")
    def check_backbone(self) -> "ModelSettings":
        if self.finetune_backbone and self.lora.enabled:
            raise ValueError("finetune_backbone and lora.enabled are mutually exclusive")
        return self

    @property
    def backbone_mode(self) -> BackboneMode:
        if self.lora.enabled:
            return BackboneMode.LORA
        if self.finetune_backbone:
            return BackboneMode.FINETUNE
        return BackboneMode.FROZEN


class OptimSettings(SectionModel):
    lr: float = Field(1e-4, gt=0.0, description="Searched over 1e-5, 3e-5, 1e-4, 1e-3")
    weight_decay: float = Field(0.1, ge=0.0, description="Decoupled decay; searched over 0.05, 0.1")
    batch_size: int = Field(16, ge=1, description="Searched over 16, 32, 64")
    epochs: int = Field(30, ge=0)
    aggregator_lr_scale: float = Field(
        10.0,
        gt=0.0,
        description="Learning-rate multiplier for the layer weighting (posterior predictor, static logits)",
    )
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class ObjectiveSettings(SectionModel):
    beta: float = Field(0.05, ge=0.0, description="KL weight; searched over 0.01, 0.05, 0.1")
    prior_family: PriorFamily = PriorFamily.CHI2
    prior_df: float = Field(3.0, gt=0.0, description="chi2 degrees of freedom; searched over 1, 3, 5, 15, 35, 50, 100, 400")
    renormalize: bool = False


class PathSettings(SectionModel):
    dataset: str = "runs/dataset.bin"
    checkpoint: str = "runs/model.ckpt"
    metrics: str = "runs/metrics.jsonl"
    exports: str = "runs/exports"

    @field_validator("dataset", "checkpoint", "metrics", "exports")
    @classmethod
    def non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("path must not be empty")
        return v


class RunConfig(SectionModel):
    """Complete, reproducible description of one run"""

    task: Optional[Task] = None
    seed: int = Field(42, ge=0, lt=2**64)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    model: ModelSettings = Field(default_factory=ModelSettings)
    optim: OptimSettings = Field(default_factory=OptimSettings)
    objective: ObjectiveSettings = Field(default_factory=ObjectiveSettings)
    paths: PathSettings = Field(default_factory=PathSettings)

    @model_validator(mode="after")
    def check_cross_section(self) -> "RunConfig":
        if self.synth.dim % self.model.attention_heads != 0:
            raise ValueError(
                f"dim ({self.synth.dim}) must be divisible by attention_heads "
                f"({self.model.attention_heads})"
            )
        if self.model.lora.enabled and self.model.lora.rank > self.synth.dim:
            raise ValueError(
                f"LoRA rank ({self.model.lora.rank}) must not exceed dim ({self.synth.dim})"
            )
        return self

    @property
    def data_seed(self) -> int:
        return self.seed if self.synth.seed is None else self.synth.seed

    @property
    def model_layers(self) -> int:
        """Number of layer tokens the aggregation models see"""
        return self.synth.n_layers + (1 if self.model.include_layer0 else 0)
