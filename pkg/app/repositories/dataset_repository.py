import logging

from pydantic import ValidationError

from app.core.errors import CorruptFileError
from app.repositories.container import read_container, write_container
from app.schemas.config import SynthSpec
from app.services.synthdata.generator import SPLITS, SynthDataset, SynthSplit

logger = logging.getLogger(__name__)

CONTENT = "dataset"


class DatasetRepository:
    """Repository for benchmark dataset files"""

    @staticmethod
    def save(dataset: SynthDataset, path: str) -> None:
        """
        Write a dataset container.

        Args:
            dataset: Generated dataset
            path: Output file path
        """
        meta = {
            "seed": dataset.seed,
            "spec": dataset.spec.model_dump(mode="json"),
            "split_sizes": {name: len(dataset.split(name)) for name in SPLITS},
        }
        arrays = {"means": dataset.means, "markers": dataset.markers}
        for name in SPLITS:
            split = dataset.split(name)
            arrays[f"{name}.stacks"] = split.stacks
            arrays[f"{name}.labels"] = split.labels
            arrays[f"{name}.regimes"] = split.regimes
        try:
            write_container(path, CONTENT, meta, arrays)
            logger.info(f"Saved dataset to {path}")
        except Exception as e:
            logger.error(f"Failed to save dataset to {path}: {e}")
            raise

    @staticmethod
    def load(path: str) -> SynthDataset:
        """
        Read a dataset container.

        Raises:
            CorruptFileError: If the file is truncated or inconsistent
            VersionMismatchError: If the file format version is unsupported
        """
        manifest, arrays = read_container(path, CONTENT)
        try:
            spec = SynthSpec.model_validate(manifest.meta["spec"])
            dataset = SynthDataset(
                spec=spec,
                seed=int(manifest.meta["seed"]),
                means=arrays["means"],
                markers=arrays["markers"],
            )
            for name in SPLITS:
                dataset.splits[name] = SynthSplit(
                    stacks=arrays[f"{name}.stacks"],
                    labels=arrays[f"{name}.labels"],
                    regimes=arrays[f"{name}.regimes"],
                )
        except (KeyError, ValidationError) as e:
            raise CorruptFileError(f"dataset file {path} is missing content: {e}") from e
        logger.info(f"Loaded dataset from {path}")
        return dataset
