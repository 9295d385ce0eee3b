"""
Shared test fixtures for the VARAN test suite.

Configs are deliberately tiny (a handful of layers, dims and samples) so the
training and CLI tests finish in seconds.
"""

import os

# Progress bars and .env values must not leak into test runs
os.environ["VARAN_SHOW_PROGRESS"] = "false"
os.environ.setdefault("VARAN_LOG_LEVEL", "WARNING")

import numpy as np
import pytest

from app.schemas.config import (
    ModelSettings,
    OptimSettings,
    PathSettings,
    RunConfig,
    SplitSizes,
    SynthSpec,
)
from app.services.aggregation.layers import LayerStack
from app.services.synthdata.generator import generate_dataset


def make_config(tmp_path, **sections) -> RunConfig:
    """Tiny run config writing every artifact below ``tmp_path``."""
    defaults = dict(
        seed=7,
        synth=SynthSpec(
            n_layers=4,
            dim=8,
            seq_len=3,
            n_classes=3,
            n_regimes=2,
            samples_per_split=SplitSizes(train=48, val=24, test=24),
        ),
        model=ModelSettings(head_hidden=8, attention_heads=2),
        optim=OptimSettings(epochs=2, batch_size=16, lr=1e-3),
        paths=PathSettings(
            dataset=str(tmp_path / "data" / "dataset.bin"),
            checkpoint=str(tmp_path / "model.ckpt"),
            metrics=str(tmp_path / "metrics.jsonl"),
            exports=str(tmp_path / "exports"),
        ),
    )
    defaults.update(sections)
    return RunConfig(**defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    return make_config(tmp_path)


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate_dataset(tiny_config.synth, tiny_config.data_seed)


@pytest.fixture
def stored_batch(tiny_dataset):
    """First 5 training stacks (h_0..h_n) with their labels."""
    split = tiny_dataset.split("train")
    return split.stacks[:5], split.labels[:5]


@pytest.fixture
def random_stack(rng):
    return LayerStack.from_array(rng.standard_normal((2, 3, 5, 4)))
