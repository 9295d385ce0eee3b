"""End-to-end tests for the varan command line."""

import csv
import json

import pytest

from app.core.config import dump_run_config
from app.main import EXIT_OK, EXIT_VALIDATION, run
from app.repositories.checkpoint_repository import CheckpointRepository
from tests.conftest import make_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(dump_run_config(make_config(tmp_path)))
    return str(path)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


class TestHelpAndConfig:
    def test_help_lists_config_keys(self, capsys):
        assert run(["--help"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Configuration keys" in out
        assert "objective.prior_df" in out

    def test_show_config_applies_overrides(self, capsys, config_file):
        assert run(["show-config", "--config", config_file, "--set", "optim.lr=0.01"]) == EXIT_OK
        document = _stdout_json(capsys)
        assert document["optim"]["lr"] == 0.01
        assert document["seed"] == 7

    def test_describe(self, capsys):
        assert run(["show-config", "--describe"]) == EXIT_OK
        assert "model.lora.rank = 16" in capsys.readouterr().out

    def test_unknown_override_key(self):
        assert run(["show-config", "--set", "optim.momentum=0.9"]) == EXIT_VALIDATION

    def test_unknown_subcommand(self):
        assert run(["fly"]) == EXIT_VALIDATION

    def test_missing_config_file(self, tmp_path):
        assert run(["show-config", "--config", str(tmp_path / "absent.json")]) == EXIT_VALIDATION


class TestPlotPrior:
    def test_writes_normalized_rows(self, tmp_path, capsys):
        out = tmp_path / "prior.csv"
        assert run(["plot-prior", "--df", "3", "--layers", "12", "--out", str(out)]) == EXIT_OK
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["layer_index"]) for r in rows] == list(range(1, 13))
        assert abs(sum(float(r["probability"]) for r in rows) - 1.0) <= 1e-12
        assert capsys.readouterr().out.strip() == str(out)

    def test_rejects_zero_layers(self, tmp_path):
        assert run(["plot-prior", "--layers", "0", "--out", str(tmp_path / "p.csv")]) == EXIT_VALIDATION

    def test_rejects_non_positive_df(self, tmp_path):
        assert run(["plot-prior", "--df", "0", "--out", str(tmp_path / "p.csv")]) == EXIT_VALIDATION


class TestGradCheck:
    def test_single_case(self, capsys):
        assert run(["grad-check", "--seeds", "1", "--case", "add"]) == EXIT_OK
        assert "add" in capsys.readouterr().out

    def test_rejects_zero_seeds(self):
        assert run(["grad-check", "--seeds", "0"]) == EXIT_VALIDATION


class TestPipeline:
    def test_gen_train_eval_export(self, tmp_path, capsys, config_file):
        assert run(["gen-data", "--config", config_file]) == EXIT_OK
        assert _stdout_json(capsys) == {"train": 48, "val": 24, "test": 24}

        assert run(["train", "--config", config_file]) == EXIT_OK
        trained = _stdout_json(capsys)
        assert trained["split"] == "test"
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "metrics.jsonl").exists()

        assert run(["eval", "--config", config_file]) == EXIT_OK
        evaluated = _stdout_json(capsys)
        assert evaluated["accuracy"] == trained["accuracy"]

        assert run(["eval", "--config", config_file, "--split", "val", "--renormalize"]) == EXIT_OK
        assert _stdout_json(capsys)["split"] == "val"

        out = tmp_path / "weights.csv"
        assert run(["export-weights", "--config", config_file, "--out", str(out)]) == EXIT_OK
        with out.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["sample_id", "true_regime", "argmax_layer", "w_1", "w_2", "w_3", "w_4"]
        assert len(rows) == 25

    def test_compare_with_finetuned_backbone(self, tmp_path, capsys, config_file):
        args = ["compare", "--config", config_file, "--backbone", "finetune", "--kind", "varan", "--kind", "last_layer"]
        assert run(args) == EXIT_OK
        report = _stdout_json(capsys)
        assert report["backbone"] == "finetune"
        assert [e["kind"] for e in report["entries"]] == ["varan", "last_layer"]
        stored = CheckpointRepository.load(str(tmp_path / "model-varan.ckpt"))
        assert stored.config.model.finetune_backbone
        assert stored.frozen == ["backbone.embedding"]

    def test_export_rejects_baseline_checkpoint(self, tmp_path, config_file):
        assert run(["train", "--config", config_file, "--kind", "weighted_sum", "--epochs", "1"]) == EXIT_OK
        assert run(["export-weights", "--config", config_file]) == EXIT_VALIDATION

    def test_eval_without_checkpoint(self, config_file):
        assert run(["eval", "--config", config_file]) == EXIT_VALIDATION

    def test_stale_dataset_is_rejected(self, config_file):
        assert run(["gen-data", "--config", config_file]) == EXIT_OK
        assert run(["train", "--config", config_file, "--seed", "8"]) == EXIT_VALIDATION

    def test_sweep_requires_list_values(self, config_file):
        assert run(["sweep", "--config", config_file, "--grid", "optim.lr=0.1"]) == EXIT_VALIDATION
