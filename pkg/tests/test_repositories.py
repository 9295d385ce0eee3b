import json

import numpy as np
import pytest

from app.core.errors import CorruptFileError, KindMismatchError, VersionMismatchError
from app.repositories.checkpoint_repository import Checkpoint, CheckpointRepository
from app.repositories.container import decode_container, encode_container
from app.repositories.dataset_repository import DatasetRepository
from app.repositories.metrics_repository import MetricsRepository
from app.schemas.artifacts import MetricRecord
from app.schemas.config import LoraSettings, ModelKind, ModelSettings
from app.services.aggregation.model_factory import ModelFactory
from tests.conftest import make_config


def _checkpoint(config, kind=ModelKind.VARAN):
    model = ModelFactory.create(config, kind)
    return Checkpoint.from_store(kind, model.store, config, step=12, best_epoch=2, best_metric=0.5)


def _with_version(raw: bytes, version: int) -> bytes:
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline])
    header["version"] = version
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + raw[newline:]


class TestContainer:
    def test_encoding_is_deterministic(self):
        arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.array([1, 2], dtype=np.int32)}
        assert encode_container("dataset", {"x": 1}, arrays) == encode_container("dataset", {"x": 1}, arrays)

    def test_decode_restores_dtypes(self):
        arrays = {"a": np.linspace(0, 1, 4), "labels": np.array([3, 0, 1], dtype=np.int64)}
        _, decoded = decode_container(encode_container("dataset", {}, arrays), "dataset")
        assert decoded["a"].dtype == np.float64
        assert decoded["labels"].dtype == np.int32
        np.testing.assert_array_equal(decoded["labels"], [3, 0, 1])

    def test_truncated_payload(self):
        raw = encode_container("dataset", {}, {"a": np.ones(8)})
        with pytest.raises(CorruptFileError):
            decode_container(raw[:-3], "dataset")

    def test_trailing_bytes(self):
        raw = encode_container("dataset", {}, {"a": np.ones(2)})
        with pytest.raises(CorruptFileError):
            decode_container(raw + b"\x00", "dataset")

    def test_missing_manifest(self):
        with pytest.raises(CorruptFileError):
            decode_container(b"not a container", "dataset")

    def test_wrong_content(self):
        raw = encode_container("dataset", {}, {})
        with pytest.raises(CorruptFileError):
            decode_container(raw, "checkpoint")

    def test_unsupported_version(self):
        raw = _with_version(encode_container("dataset", {}, {"a": np.ones(2)}), 2)
        with pytest.raises(VersionMismatchError):
            decode_container(raw, "dataset")


class TestCheckpointRepository:
    def test_save_load_save_is_byte_identical(self, tiny_config, tmp_path):
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        CheckpointRepository.save(_checkpoint(tiny_config), str(first))
        loaded = CheckpointRepository.load(str(first))
        CheckpointRepository.save(loaded, str(second))
        assert first.read_bytes() == second.read_bytes()
        assert loaded.best_epoch == 2
        assert loaded.config == tiny_config

    def test_frozen_names_survive(self, tmp_path):
        lora = LoraSettings(enabled=True, rank=2)
        config = make_config(tmp_path, model=ModelSettings(head_hidden=8, attention_heads=2, lora=lora))
        checkpoint = _checkpoint(config)
        restored = Checkpoint.from_bytes(checkpoint.to_bytes()).to_store()
        assert "backbone.embedding" in restored.frozen_names
        assert "backbone.0.lora_a" in restored.trainable_names

    def test_kind_mismatch(self, tiny_config, tmp_path):
        path = str(tmp_path / "ws.ckpt")
        CheckpointRepository.save(_checkpoint(tiny_config, ModelKind.WEIGHTED_SUM), path)
        with pytest.raises(KindMismatchError):
            CheckpointRepository.load(path, expected_kind=ModelKind.VARAN)

    def test_truncated_file(self, tiny_config, tmp_path):
        path = tmp_path / "cut.ckpt"
        raw = _checkpoint(tiny_config).to_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(CorruptFileError):
            CheckpointRepository.load(str(path))

    def test_version_mismatch(self, tiny_config, tmp_path):
        path = tmp_path / "future.ckpt"
        path.write_bytes(_with_version(_checkpoint(tiny_config).to_bytes(), 99))
        with pytest.raises(VersionMismatchError):
            CheckpointRepository.load(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            CheckpointRepository.load(str(tmp_path / "absent.ckpt"))


class TestDatasetRepository:
    def test_round_trip(self, tiny_dataset, tiny_config):
        path = tiny_config.paths.dataset
        DatasetRepository.save(tiny_dataset, path)
        loaded = DatasetRepository.load(path)
        assert loaded.seed == tiny_dataset.seed
        assert loaded.spec == tiny_dataset.spec
        for name in ("train", "val", "test"):
            np.testing.assert_array_equal(loaded.split(name).stacks, tiny_dataset.split(name).stacks)
            np.testing.assert_array_equal(loaded.split(name).regimes, tiny_dataset.split(name).regimes)


class TestMetricsRepository:
    def _record(self, step, split="val"):
        return MetricRecord(step=step, split=split, loss=1.5, task_loss=1.2, kl=6.0, accuracy=0.5, weighted_f1=0.25)

    def test_write_replaces_stream(self, tmp_path):
        path = str(tmp_path / "runs" / "metrics.jsonl")
        MetricsRepository.write([self._record(1, "train")], path)
        MetricsRepository.write([self._record(1, "train"), self._record(1), self._record(2, "test")], path)
        records = MetricsRepository.read(path)
        assert [(r.step, r.split) for r in records] == [(1, "train"), (1, "val"), (2, "test")]
        assert records[0].elbo is None

    def test_one_object_per_line(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        MetricsRepository.write([self._record(3)], str(path))
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["accuracy"] == 0.5
