"""
Full-size regime-switching benchmark.

Runs every model kind on the default dataset; excluded from the default
pytest run, select with ``pytest -m slow``.
"""

import pytest

from app.repositories.checkpoint_repository import CheckpointRepository
from app.schemas.config import ModelKind, PathSettings, RunConfig, SplitSizes, SynthSpec
from app.services.aggregation.model_factory import ModelFactory
from app.services.analysis import layer_weights, regime_recovery
from app.services.synthdata.generator import generate_dataset
from app.services.training.trainer import compare, train

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    config = RunConfig(
        paths=PathSettings(
            dataset=str(root / "dataset.bin"),
            checkpoint=str(root / "model.ckpt"),
            metrics=str(root / "metrics.jsonl"),
            exports=str(root / "exports"),
        )
    )
    dataset = generate_dataset(config.synth, config.data_seed)
    return config, dataset, compare(config, dataset)


class TestBenchmark:
    def test_oracle_ceiling(self, benchmark):
        _, _, report = benchmark
        assert report.oracle_accuracy >= 0.9

    def test_varan_beats_static_baselines(self, benchmark):
        _, _, report = benchmark
        accuracy = {e.kind: e.test_accuracy for e in report.entries}
        assert accuracy[ModelKind.VARAN] >= 0.80
        assert accuracy[ModelKind.VARAN] >= accuracy[ModelKind.WEIGHTED_SUM] + 0.05
        assert accuracy[ModelKind.VARAN] >= accuracy[ModelKind.LAST_LAYER] + 0.05

    def test_weights_recover_regime(self, benchmark):
        _, dataset, report = benchmark
        entry = next(e for e in report.entries if e.kind == ModelKind.VARAN)
        stored = CheckpointRepository.load(entry.checkpoint_path, expected_kind=ModelKind.VARAN)
        model = ModelFactory.from_store(stored.kind, stored.config, stored.to_store())
        split = dataset.split("test")
        assert regime_recovery(model, split, layer_weights(model, split)) >= 0.7


class TestNullSignal:
    def test_no_signal_gives_chance_accuracy(self, tmp_path):
        spec = SynthSpec(signal_strength=0.0, samples_per_split=SplitSizes(train=800, val=200, test=2000))
        config = RunConfig(
            synth=spec,
            optim={"epochs": 3},
            paths=PathSettings(
                dataset=str(tmp_path / "dataset.bin"),
                checkpoint=str(tmp_path / "model.ckpt"),
                metrics=str(tmp_path / "metrics.jsonl"),
                exports=str(tmp_path / "exports"),
            ),
        )
        result = train(config, generate_dataset(spec, config.data_seed))
        assert abs(result.test_record.accuracy - 1 / spec.n_classes) <= 0.05


class TestSingleRegime:
    def test_varan_and_weighted_sum_are_on_par(self, tmp_path):
        config = RunConfig(
            synth=SynthSpec(n_regimes=1),
            paths=PathSettings(
                dataset=str(tmp_path / "dataset.bin"),
                checkpoint=str(tmp_path / "model.ckpt"),
                metrics=str(tmp_path / "metrics.jsonl"),
                exports=str(tmp_path / "exports"),
            ),
        )
        dataset = generate_dataset(config.synth, config.data_seed)
        report = compare(config, dataset, [ModelKind.VARAN, ModelKind.WEIGHTED_SUM])
        accuracy = {e.kind: e.test_accuracy for e in report.entries}
        assert abs(accuracy[ModelKind.VARAN] - accuracy[ModelKind.WEIGHTED_SUM]) < 0.02
