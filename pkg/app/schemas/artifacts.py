from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.config import BackboneMode, ModelKind

CONTAINER_FORMAT = "varan-container"
FORMAT_VERSION = 1


class ArrayEntry(BaseModel):
    """One little-endian array in a container payload"""

    model_config = ConfigDict(extra="forbid")

    name: str
    dtype: Literal["<f8", "<i4"]
    shape: List[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)


class ContainerManifest(BaseModel):
    """JSON header of a dataset or checkpoint file"""

    model_config = ConfigDict(extra="forbid")

    format: Literal["varan-container"] = CONTAINER_FORMAT
    version: int
    content: Literal["dataset", "checkpoint"]
    meta: Dict[str, Any] = Field(default_factory=dict)
    arrays: List[ArrayEntry] = Field(default_factory=list)


class MetricRecord(BaseModel):
    """One evaluation, emitted as one JSON line"""

    step: int
    split: str
    loss: float
    task_loss: float
    kl: float
    accuracy: float
    weighted_f1: float
    elbo: Optional[float] = Field(
        None, description="Mean per-sample evidence lower bound (beta = 1); VARAN evaluations only"
    )


class CompareEntry(BaseModel):
    kind: ModelKind
    test_accuracy: float
    weighted_f1: float
    val_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    weights_path: str
    checkpoint_path: str


class CompareReport(BaseModel):
    seed: int
    backbone: BackboneMode = BackboneMode.FROZEN
    oracle_accuracy: float
    entries: List[CompareEntry]


class SweepEntry(BaseModel):
    overrides: Dict[str, Any]
    val_accuracy: float
    test_accuracy: float
    best_epoch: Optional[int] = None
    checkpoint_path: str


class SweepReport(BaseModel):
    kind: ModelKind
    entries: List[SweepEntry]
