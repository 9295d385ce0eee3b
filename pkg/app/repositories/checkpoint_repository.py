import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from app.core.errors import CorruptFileError, KindMismatchError
from app.repositories.container import decode_container, encode_container, read_container, write_container
from app.schemas.artifacts import FORMAT_VERSION
from app.schemas.config import ModelKind, RunConfig
from app.services.aggregation.parameters import ParameterStore

logger = logging.getLogger(__name__)

CONTENT = "checkpoint"


@dataclass
class Checkpoint:
    kind: ModelKind
    params: Dict[str, np.ndarray]
    config: RunConfig
    frozen: List[str] = field(default_factory=list)
    step: int = 0
    best_epoch: Optional[int] = None
    best_metric: Optional[float] = None
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_store(
        cls,
        kind: ModelKind,
        store: ParameterStore,
        config: RunConfig,
        step: int = 0,
        best_epoch: Optional[int] = None,
        best_metric: Optional[float] = None,
    ) -> "Checkpoint":
        return cls(
            kind=ModelKind(kind),
            params={name: np.array(value) for name, value in store.items()},
            config=config,
            frozen=list(store.frozen_names),
            step=step,
            best_epoch=best_epoch,
            best_metric=best_metric,
        )

    def to_store(self) -> ParameterStore:
        store = ParameterStore()
        for name, value in self.params.items():
            store.add(name, value, frozen=name in self.frozen)
        return store

    def _meta(self) -> dict:
        return {
            "kind": self.kind.value,
            "config": self.config.model_dump(mode="json"),
            "frozen": list(self.frozen),
            "step": self.step,
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
        }

    def to_bytes(self) -> bytes:
        return encode_container(CONTENT, self._meta(), self.params)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        return _checkpoint_from(*decode_container(raw, CONTENT))


def _checkpoint_from(manifest, arrays) -> Checkpoint:
    meta = manifest.meta
    try:
        return Checkpoint(
            kind=ModelKind(meta["kind"]),
            params={name: arrays[name].astype(np.float64) for name in arrays},
            config=RunConfig.model_validate(meta["config"]),
            frozen=list(meta.get("frozen", [])),
            step=int(meta["step"]),
            best_epoch=meta.get("best_epoch"),
            best_metric=meta.get("best_metric"),
            format_version=manifest.version,
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise CorruptFileError(f"checkpoint metadata is incomplete: {e}") from e


class CheckpointRepository:
    """Repository for model checkpoints"""

    @staticmethod
    def save(checkpoint: Checkpoint, path: str) -> None:
        try:
            write_container(path, CONTENT, checkpoint._meta(), checkpoint.params)
            logger.info(f"Saved {checkpoint.kind.value} checkpoint (step {checkpoint.step}) to {path}")
        except Exception as e:
            logger.error(f"Failed to save checkpoint to {path}: {e}")
            raise

    @staticmethod
    def load(path: str, expected_kind: Optional[ModelKind] = None) -> Checkpoint:
        """
        Read a checkpoint.

        Args:
            path: Checkpoint file
            expected_kind: When given, the stored kind must match

        Raises:
            KindMismatchError: If the stored model kind differs from ``expected_kind``
            CorruptFileError: If the file is truncated or inconsistent
            VersionMismatchError: If the file format version is unsupported
        """
        checkpoint = _checkpoint_from(*read_container(path, CONTENT))
        if expected_kind is not None and checkpoint.kind != ModelKind(expected_kind):
            raise KindMismatchError(
                f"checkpoint {path} holds a {checkpoint.kind.value} model, "
                f"expected {ModelKind(expected_kind).value}"
            )
        logger.info(f"Loaded {checkpoint.kind.value} checkpoint from {path}")
        return checkpoint
