import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from pydantic import ValidationError

from app.core.config import (
    apply_overrides,
    describe_config_keys,
    dump_run_config,
    load_run_config,
    parse_override,
    settings,
)
from app.core.errors import ConfigError, GradCheckFailure, VaranValidationError
from app.core.logging_config import configure_logging
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.dataset_repository import DatasetRepository
from app.schemas.config import BackboneMode, ModelKind, PriorFamily, RunConfig, Task
from app.services.aggregation.model_factory import ModelFactory
from app.services.analysis import export_weight_analysis, write_prior_csv
from app.services.distributions import PriorSpec, build_prior
from app.services.grad_suite import GRAD_CASES, run_grad_suite
from app.services.synthdata.generator import SPLITS, SynthDataset, generate_dataset
from app.services.training.trainer import compare, evaluate, save_run, sweep, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

KIND_CHOICE = click.Choice([k.value for k in ModelKind])
BACKBONE_CHOICE = click.Choice([m.value for m in BackboneMode])


def _config_epilog() -> str:
    # \b keeps click from rewrapping the key table
    lines = ["\b", "Configuration keys (--set KEY=VALUE, JSON values):"]
    for key, default, description in describe_config_keys():
        note = f"  {description}" if description else ""
        lines.append(f"  {key} = {json.dumps(default)}{note}")
    return "\n".join(lines)


def common_options(f):
    """--config, --set and --log-level, shared by every subcommand"""
    f = click.option("--log-level", default=None, help="Overrides VARAN_LOG_LEVEL")(f)
    f = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Dotted-key override, e.g. optim.lr=1e-3 (repeatable)",
    )(f)
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="JSON run configuration",
    )(f)
    return f


def _prepare(
    config_path: Optional[str],
    overrides: Sequence[str],
    log_level: Optional[str],
    task: Optional[Task],
    flags: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Configure logging, load the file, then apply --set items and dedicated flags."""
    configure_logging(log_level)
    config, document = load_run_config(config_path)
    pairs = [parse_override(item) for item in overrides]
    if task is not None:
        pairs.append(("task", task.value))
    pairs.extend((key, value) for key, value in (flags or {}).items() if value is not None)
    return apply_overrides(config, pairs, document)


def _backbone_flags(mode: Optional[str]) -> Dict[str, Any]:
    """--backbone value -> the model flags it stands for."""
    if mode is None:
        return {}
    mode = BackboneMode(mode)
    return {
        "model.lora.enabled": mode == BackboneMode.LORA,
        "model.finetune_backbone": mode == BackboneMode.FINETUNE,
    }


def _dataset_for(config: RunConfig) -> SynthDataset:
    """Load the configured dataset, generating and saving it when the file is missing."""
    path = config.paths.dataset
    if not Path(path).exists():
        logger.info(f"No dataset at {path}; generating one from seed {config.data_seed}")
        dataset = generate_dataset(config.synth, config.data_seed)
        DatasetRepository.save(dataset, path)
        return dataset
    dataset = DatasetRepository.load(path)
    stored = dataset.spec.model_dump(mode="json", exclude={"seed"})
    wanted = config.synth.model_dump(mode="json", exclude={"seed"})
    if stored != wanted or dataset.seed != config.data_seed:
        raise ConfigError(
            f"Dataset at {path} was generated from a different synth section or seed; "
            "rerun gen-data or point paths.dataset elsewhere"
        )
    return dataset


def _echo_json(document: Any) -> None:
    click.echo(json.dumps(document, indent=2, sort_keys=True))


@click.group(
    help=f"{settings.APP_NAME}: input-dependent aggregation of encoder layers.",
    epilog=_config_epilog(),
    context_settings={"help_option_names": ["-h", "--help"]},
)
def cli() -> None:
    pass


@cli.command("gen-data")
@common_options
@click.option("--out", default=None, help="Dataset file (paths.dataset)")
@click.option("--seed", type=int, default=None, help="Run seed (seed)")
def gen_data(config_path, overrides, log_level, out, seed):
    """Generate the regime-switching benchmark and write it to disk."""
    config = _prepare(
        config_path, overrides, log_level, Task.GEN_DATA, {"paths.dataset": out, "seed": seed}
    )
    dataset = generate_dataset(config.synth, config.data_seed)
    DatasetRepository.save(dataset, config.paths.dataset)
    _echo_json({name: len(dataset.split(name)) for name in SPLITS})


@cli.command("train")
@common_options
@click.option("--kind", type=KIND_CHOICE, default=None, help="Model kind (model.kind)")
@click.option("--epochs", type=int, default=None, help="Training epochs (optim.epochs)")
@click.option("--seed", type=int, default=None, help="Run seed (seed)")
@click.option("--backbone", type=BACKBONE_CHOICE, default=None, help="Toy backbone training mode")
def train_command(config_path, overrides, log_level, kind, epochs, seed, backbone):
    """Train one model; writes the best checkpoint and the metric stream."""
    config = _prepare(
        config_path,
        overrides,
        log_level,
        Task.TRAIN,
        {"model.kind": kind, "optim.epochs": epochs, "seed": seed, **_backbone_flags(backbone)},
    )
    result = train(config, _dataset_for(config))
    save_run(result, config.paths.checkpoint, config.paths.metrics)
    _echo_json(result.test_record.model_dump(mode="json"))


@cli.command("eval")
@common_options
@click.option("--checkpoint", default=None, help="Checkpoint file (paths.checkpoint)")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option(
    "--renormalize/--no-renormalize",
    default=None,
    help="Report log-softmax calibrated scores (objective.renormalize)",
)
@click.option("--kind", type=KIND_CHOICE, default=None, help="Required checkpoint kind")
def eval_command(config_path, overrides, log_level, checkpoint, split, renormalize, kind):
    """Evaluate a checkpoint on one split of the configured dataset."""
    config = _prepare(
        config_path,
        overrides,
        log_level,
        Task.EVAL,
        {"paths.checkpoint": checkpoint, "objective.renormalize": renormalize},
    )
    stored = CheckpointRepository.load(config.paths.checkpoint, expected_kind=kind)
    model = ModelFactory.from_store(stored.kind, stored.config, stored.to_store())
    dataset = _dataset_for(config)
    record = evaluate(
        model,
        dataset.split(split),
        step=stored.step,
        split_name=split,
        renormalize=config.objective.renormalize,
    )
    _echo_json(record.model_dump(mode="json"))


@cli.command("compare")
@common_options
@click.option("--kind", "kinds", type=KIND_CHOICE, multiple=True, help="Restrict to these kinds")
@click.option("--epochs", type=int, default=None, help="Training epochs (optim.epochs)")
@click.option("--seed", type=int, default=None, help="Run seed (seed)")
@click.option("--backbone", type=BACKBONE_CHOICE, default=None, help="Toy backbone training mode")
def compare_command(config_path, overrides, log_level, kinds, epochs, seed, backbone):
    """Train every model kind on one dataset and report test metrics."""
    config = _prepare(
        config_path,
        overrides,
        log_level,
        Task.COMPARE,
        {"optim.epochs": epochs, "seed": seed, **_backbone_flags(backbone)},
    )
    selected = [ModelKind(k) for k in kinds] or list(ModelKind)
    report = compare(config, _dataset_for(config), selected)
    _echo_json(report.model_dump(mode="json"))


@cli.command("plot-prior")
@common_options
@click.option("--df", type=float, default=None, help="Degrees of freedom (objective.prior_df)")
@click.option("--layers", type=int, default=None, help="Number of layers; defaults to the model's")
@click.option(
    "--family",
    type=click.Choice([f.value for f in PriorFamily]),
    default=None,
    help="Prior family (objective.prior_family)",
)
@click.option("--out", default=None, help="CSV path; defaults to <exports>/prior.csv")
def plot_prior(config_path, overrides, log_level, df, layers, family, out):
    """Write the prior PMF as layer_index,probability rows."""
    config = _prepare(
        config_path,
        overrides,
        log_level,
        Task.PLOT_PRIOR,
        {"objective.prior_df": df, "objective.prior_family": family},
    )
    if layers is not None and layers < 1:
        raise click.BadParameter("must be >= 1", param_hint="--layers")
    prior = build_prior(
        PriorSpec(
            n_layers=layers or config.model_layers,
            degrees_of_freedom=config.objective.prior_df,
            family=config.objective.prior_family,
        )
    )
    path = out or str(Path(config.paths.exports) / "prior.csv")
    write_prior_csv(prior, path)
    click.echo(path)


@cli.command("grad-check")
@common_options
@click.option("--seeds", type=int, default=None, help="Draws per case (VARAN_GRAD_CHECK_SEEDS)")
@click.option("--case", "cases", type=click.Choice(list(GRAD_CASES)), multiple=True)
def grad_check(config_path, overrides, log_level, seeds, cases):
    """Finite-difference check of every differentiable op and the full loss."""
    _prepare(config_path, overrides, log_level, Task.GRAD_CHECK)
    if seeds is not None and seeds < 1:
        raise click.BadParameter("must be >= 1", param_hint="--seeds")
    report = run_grad_suite(seeds=seeds, cases=list(cases) or None)
    for case, error in report.worst_errors().items():
        click.echo(f"{case:<24} max_rel_error={error:.3e}")
    click.echo(f"{len(report.results)} checks in {report.elapsed_seconds:.1f}s")
    if not report.passed:
        raise GradCheckFailure(sorted({r.case for r in report.failures}))


@cli.command("export-weights")
@common_options
@click.option("--checkpoint", default=None, help="VARAN checkpoint (paths.checkpoint)")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--out", default=None, help="CSV path; defaults to <exports>/weights-<split>.csv")
@click.option("--layout", type=click.Choice(["wide", "long"]), default="wide", show_default=True)
def export_weights(config_path, overrides, log_level, checkpoint, split, out, layout):
    """Per-sample posterior layer weights of a trained VARAN model."""
    config = _prepare(
        config_path,
        overrides,
        log_level,
        Task.EXPORT_WEIGHTS,
        {"paths.checkpoint": checkpoint},
    )
    stored = CheckpointRepository.load(config.paths.checkpoint, expected_kind=ModelKind.VARAN)
    path = out or str(Path(config.paths.exports) / f"weights-{split}.csv")
    export_weight_analysis(stored, _dataset_for(config).split(split), path, layout)
    click.echo(path)


def _parse_grid(items: Sequence[str]) -> Dict[str, List[Any]]:
    grid: Dict[str, List[Any]] = {}
    for item in items:
        key, values = parse_override(item)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"Grid values for '{key}' must be a non-empty JSON list")
        grid[key] = values
    return grid


@cli.command("sweep")
@common_options
@click.option(
    "--grid",
    "grid_items",
    multiple=True,
    required=True,
    metavar="KEY=[V1,V2,...]",
    help="Dotted key and JSON list of values (repeatable)",
)
@click.option("--kind", type=KIND_CHOICE, default=None, help="Model kind (model.kind)")
def sweep_command(config_path, overrides, log_level, grid_items, kind):
    """Grid runner: one training run per grid point, ranked by validation accuracy."""
    config = _prepare(config_path, overrides, log_level, Task.SWEEP, {"model.kind": kind})
    report = sweep(config, _dataset_for(config), _parse_grid(grid_items))
    _echo_json(report.model_dump(mode="json"))


@cli.command("show-config")
@common_options
@click.option("--describe", is_flag=True, help="List every key with its default and notes")
def show_config(config_path, overrides, log_level, describe):
    """Print the effective configuration after file and flag overrides."""
    config = _prepare(config_path, overrides, log_level, None)
    if describe:
        click.echo(_config_epilog().replace("\b\n", "", 1))
        return
    click.echo(dump_run_config(config))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand and map its outcome to an exit code.

    Returns:
        0 on success, 1 for invalid input (config, flags, files), 2 when a
        computation fails
    """
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = cli.main(args=args, prog_name="varan", standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_VALIDATION
    except (VaranValidationError, ValidationError, FileNotFoundError) as e:
        logger.error(f"Invalid input: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"Command failed: {e}", exc_info=True)
        click.echo(f"Error: {e}", err=True)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
