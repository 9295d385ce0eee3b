"""
Regime-switching benchmark.

Each sample has a hidden regime r and a label y. Encoder layer map(r) carries
the class mean mu[y, r] plus Gaussian noise. Every other encoder layer carries
noise, the regime marker m[r] and a distractor mu[y', r] for an independently
drawn y'. Only one layer per sample holds label information, and which one it
is depends on the input, so no fixed weighting of the layers can isolate it.

Stored stacks have shape (N, n + 1, s, d): index 0 is the embedding layer h_0
(pure noise), indices 1..n are the encoder layers.

Randomness comes from numpy ``Generator(PCG64)`` streams spawned from one
``SeedSequence(seed)``: means, markers, then one stream per split in the order
train, val, test.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from app.core.errors import ConfigError, ShapeError
from app.schemas.config import SynthSpec

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSample:
    stack: np.ndarray
    label: int
    regime: int


@dataclass
class SynthSplit:
    """
    Samples of one split.

    ``regimes`` is ground truth for analysis only and never reaches a model.
    """

    stacks: np.ndarray
    labels: np.ndarray
    regimes: np.ndarray

    def __post_init__(self):
        n = self.stacks.shape[0]
        if self.stacks.ndim != 4 or self.labels.shape != (n,) or self.regimes.shape != (n,):
            raise ShapeError(
                "split arrays do not conform",
                [self.stacks.shape, self.labels.shape, self.regimes.shape],
            )

    def __len__(self) -> int:
        return self.stacks.shape[0]

    def __getitem__(self, i: int) -> SynthSample:
        return SynthSample(self.stacks[i], int(self.labels[i]), int(self.regimes[i]))

    def batches(
        self, batch_size: int, order: Optional[np.ndarray] = None
    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """(stacks, labels) chunks in ``order`` (default: stored order)."""
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.stacks[idx], self.labels[idx]


@dataclass
class SynthDataset:
    spec: SynthSpec
    seed: int
    means: np.ndarray
    markers: np.ndarray
    splits: Dict[str, SynthSplit] = field(default_factory=dict)

    def split(self, name: str) -> SynthSplit:
        if name not in self.splits:
            raise KeyError(f"Unknown split '{name}'; available: {', '.join(self.splits)}")
        return self.splits[name]


def informative_layer(regime: int, n_layers: int, n_regimes: int) -> int:
    """
    0-based encoder index carrying the label for ``regime``.

    Regimes are spread evenly with the top regime on the last layer:
    map(r) = round((r + 1) * n / R) - 1, rounding halves up.
    """
    if not 0 <= regime < n_regimes:
        raise ConfigError(f"regime {regime} outside [0, {n_regimes})")
    if n_regimes > n_layers:
        raise ConfigError(f"n_regimes ({n_regimes}) exceeds n_layers ({n_layers})")
    return int(np.floor((regime + 1) * n_layers / n_regimes + 0.5)) - 1


def informative_layers(regimes: np.ndarray, n_layers: int, n_regimes: int) -> np.ndarray:
    table = np.array([informative_layer(r, n_layers, n_regimes) for r in range(n_regimes)])
    return table[np.asarray(regimes, dtype=np.int64)]


def _unit_rows(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _generate_split(
    spec: SynthSpec,
    count: int,
    means: np.ndarray,
    markers: np.ndarray,
    rng: np.random.Generator,
) -> SynthSplit:
    n, s, d = spec.n_layers, spec.seq_len, spec.dim
    regimes = rng.integers(0, spec.n_regimes, size=count)
    labels = rng.integers(0, spec.n_classes, size=count)
    distractors = rng.integers(0, spec.n_classes, size=(count, n))
    stacks = rng.normal(0.0, spec.noise_sigma, size=(count, n + 1, s, d))

    hot = informative_layers(regimes, n, spec.n_regimes)
    for k in range(n):
        informative = hot == k
        content = np.where(
            informative[:, None],
            spec.signal_strength * means[labels, regimes],
            spec.marker_strength * markers[regimes]
            + spec.distractor_strength * spec.signal_strength * means[distractors[:, k], regimes],
        )
        stacks[:, k + 1] += content[:, None, :]

    return SynthSplit(
        stacks=stacks,
        labels=labels.astype(np.int32),
        regimes=regimes.astype(np.int32),
    )


def generate_dataset(spec: SynthSpec, seed: int) -> SynthDataset:
    """
    Build all three splits of the benchmark.

    Args:
        spec: Benchmark definition (already validated)
        seed: 64-bit seed; identical (spec, seed) gives bit-identical arrays

    Returns:
        The dataset with train, val and test splits
    """
    streams = [np.random.Generator(np.random.PCG64(child)) for child in np.random.SeedSequence(seed).spawn(5)]
    means_rng, markers_rng, *split_rngs = streams

    means = _unit_rows(means_rng, (spec.n_classes, spec.n_regimes, spec.dim))
    markers = _unit_rows(markers_rng, (spec.n_regimes, spec.dim))

    dataset = SynthDataset(spec=spec, seed=seed, means=means, markers=markers)
    sizes = spec.samples_per_split
    for name, rng in zip(SPLITS, split_rngs):
        dataset.splits[name] = _generate_split(spec, getattr(sizes, name), means, markers, rng)
    logger.info(
        f"Generated synthetic dataset (seed={seed}, layers={spec.n_layers}, regimes={spec.n_regimes}, "
        f"train/val/test={sizes.train}/{sizes.val}/{sizes.test})"
    )
    return dataset
