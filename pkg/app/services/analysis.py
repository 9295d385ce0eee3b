"""
Analysis exports: prior PMF tables and per-sample layer weights.

Layer columns use the encoder numbering h_1..h_n (h_0..h_n when the model
aggregates the embedding layer too).
"""

import csv
import logging
from pathlib import Path
from typing import Literal

import numpy as np

from app.core.errors import KindMismatchError
from app.repositories.checkpoint_repository import Checkpoint
from app.schemas.config import ModelKind
from app.services.aggregation.model_factory import ModelFactory
from app.services.aggregation.models import AggregationModel
from app.services.distributions import Categorical, prior_pmf_rows
from app.services.synthdata.generator import SynthSplit, informative_layers

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256

Layout = Literal["wide", "long"]


def _open_csv(path: str):
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    return target.open("w", newline="", encoding="utf-8")


def write_prior_csv(prior: Categorical, path: str) -> None:
    """Rows ``layer_index,probability``; probabilities use round-trip float repr."""
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer_index", "probability"])
        for index, probability in prior_pmf_rows(prior):
            writer.writerow([index, repr(probability)])
    logger.info(f"Wrote {prior.n}-row prior PMF to {path}")


def first_layer_index(model: AggregationModel) -> int:
    return 0 if model.config.model.include_layer0 else 1


def layer_weights(model: AggregationModel, split: SynthSplit) -> np.ndarray:
    """Per-sample weight rows (N, n) from inference-mode forwards."""
    rows = [model.forward(stacks).weights.numpy() for stacks, _ in split.batches(EVAL_BATCH_SIZE)]
    return np.concatenate(rows, axis=0)


def regime_recovery(model: AggregationModel, split: SynthSplit, weights: np.ndarray) -> float:
    """Fraction of samples whose weight argmax is the layer carrying their label."""
    spec = model.config.synth
    target = informative_layers(split.regimes, spec.n_layers, spec.n_regimes)
    if model.config.model.include_layer0:
        target = target + 1
    return float(np.mean(np.argmax(weights, axis=1) == target))


def write_weight_rows(
    model: AggregationModel,
    split: SynthSplit,
    path: str,
    layout: Layout = "wide",
) -> np.ndarray:
    """
    Export per-sample layer weights.

    ``wide`` rows are ``sample_id,true_regime,argmax_layer,w_<i>...``;
    ``long`` rows are ``sample_id,layer_index,weight``. Ties in the argmax go
    to the lowest layer.
    """
    weights = layer_weights(model, split)
    offset = first_layer_index(model)
    n = weights.shape[1]
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if layout == "long":
            writer.writerow(["sample_id", "layer_index", "weight"])
            for sample_id, row in enumerate(weights):
                for i, w in enumerate(row):
                    writer.writerow([sample_id, i + offset, repr(float(w))])
        else:
            writer.writerow(
                ["sample_id", "true_regime", "argmax_layer"] + [f"w_{i + offset}" for i in range(n)]
            )
            for sample_id, (row, regime) in enumerate(zip(weights, split.regimes)):
                writer.writerow(
                    [sample_id, int(regime), int(np.argmax(row)) + offset]
                    + [repr(float(w)) for w in row]
                )
    logger.info(f"Wrote {weights.shape[0]} weight rows ({layout}) to {path}")
    return weights


def export_weight_analysis(
    checkpoint: Checkpoint,
    split: SynthSplit,
    path: str,
    layout: Layout = "wide",
) -> np.ndarray:
    """
    Per-sample posterior weights of a trained VARAN model.

    Raises:
        KindMismatchError: If the checkpoint does not hold a VARAN model
    """
    if checkpoint.kind != ModelKind.VARAN:
        raise KindMismatchError(
            f"weight analysis needs a varan checkpoint, got {checkpoint.kind.value}"
        )
    model = ModelFactory.from_store(checkpoint.kind, checkpoint.config, checkpoint.to_store())
    weights = write_weight_rows(model, split, path, layout)
    logger.info(f"Regime recovery on exported split: {regime_recovery(model, split, weights):.4f}")
    return weights
