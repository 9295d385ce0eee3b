import logging

import numpy as np
from sklearn.metrics import accuracy_score

from app.services.synthdata.generator import SynthDataset, SynthSplit, informative_layers

logger = logging.getLogger(__name__)


def _pooled_informative(split: SynthSplit, n_layers: int, n_regimes: int) -> np.ndarray:
    hot = informative_layers(split.regimes, n_layers, n_regimes)
    rows = np.arange(len(split))
    return split.stacks[rows, hot + 1].mean(axis=1)


def oracle_probe_accuracy(dataset: SynthDataset, ablate: bool = False) -> float:
    """
    Test accuracy of a probe that is told each sample's regime.

    A nearest-class-mean classifier is fitted per regime on the pooled
    informative layer of the training split. With ``ablate`` the informative
    layer of every test sample is zeroed before prediction, which removes all
    label information. Ties go to the lowest class index.
    """
    spec = dataset.spec
    train, test = dataset.split("train"), dataset.split("test")
    train_x = _pooled_informative(train, spec.n_layers, spec.n_regimes)
    test_x = _pooled_informative(test, spec.n_layers, spec.n_regimes)
    if ablate:
        test_x = np.zeros_like(test_x)

    centroids = np.zeros((spec.n_regimes, spec.n_classes, spec.dim))
    for r in range(spec.n_regimes):
        for c in range(spec.n_classes):
            mask = (train.regimes == r) & (train.labels == c)
            if mask.any():
                centroids[r, c] = train_x[mask].mean(axis=0)
            else:
                centroids[r, c] = np.inf

    distances = np.sum((test_x[:, None, :] - centroids[test.regimes]) ** 2, axis=2)
    predictions = np.argmin(distances, axis=1)
    acc = float(accuracy_score(test.labels, predictions))
    logger.info(f"Oracle probe accuracy (ablate={ablate}): {acc:.4f}")
    return acc
