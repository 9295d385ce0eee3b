"""
Training loop, model selection, benchmark comparison and grid sweeps.

Every source of randomness is derived from the run seed: parameter init in
ModelFactory, and the per-epoch data order from ``default_rng([seed, 3, epoch])``.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.core.config import apply_overrides, settings
from app.core.errors import ConfigError, DivergenceError
from app.repositories.checkpoint_repository import Checkpoint, CheckpointRepository
from app.repositories.metrics_repository import MetricsRepository
from app.schemas.artifacts import (
    CompareEntry,
    CompareReport,
    MetricRecord,
    SweepEntry,
    SweepReport,
)
from app.schemas.config import ModelKind, RunConfig
from app.services.aggregation.model_factory import ModelFactory
from app.services.aggregation.models import WEIGHTING_PREFIXES, AggregationModel
from app.services.analysis import write_weight_rows
from app.services.autodiff.tape import Tape, backward, named_gradients
from app.services.metrics import EvaluationAccumulator
from app.services.synthdata.backbone import check_frozen, frozen_snapshot
from app.services.synthdata.generator import SynthDataset, SynthSplit
from app.services.synthdata.oracle import oracle_probe_accuracy
from app.services.training.optimizer import AdamState, adam_step

logger = logging.getLogger(__name__)

DATA_ORDER_STREAM = 3
EVAL_BATCH_SIZE = 256
# A sweep reuses one dataset and one set of output paths
FIXED_SECTIONS = ("synth", "paths")


@dataclass
class TrainResult:
    model: AggregationModel
    checkpoint: Checkpoint
    metrics: List[MetricRecord] = field(default_factory=list)

    @property
    def test_record(self) -> Optional[MetricRecord]:
        return next((r for r in reversed(self.metrics) if r.split == "test"), None)


def tagged_path(path: str, tag: str) -> str:
    """``runs/model.ckpt`` -> ``runs/model-<tag>.ckpt``"""
    p = Path(path)
    return str(p.with_name(f"{p.stem}-{tag}{p.suffix}"))


def kind_path(path: str, kind: ModelKind) -> str:
    return tagged_path(path, ModelKind(kind).value)


def epoch_order(seed: int, epoch: int, size: int) -> np.ndarray:
    return np.random.default_rng([seed, DATA_ORDER_STREAM, epoch]).permutation(size)


def _record(accumulator: EvaluationAccumulator, step: int, split: str) -> MetricRecord:
    return MetricRecord(step=step, split=split, **accumulator.summary())


def evaluate(
    model: AggregationModel,
    split: SynthSplit,
    step: int = 0,
    split_name: str = "val",
    renormalize: bool = False,
    batch_size: int = EVAL_BATCH_SIZE,
) -> MetricRecord:
    """
    Loss and classification metrics of ``model`` on one split.

    Counts and sums are reduced before division, so the result does not depend
    on how the split is batched. VARAN records also carry the mean per-sample
    evidence lower bound.
    """
    accumulator = EvaluationAccumulator()
    for stacks, labels in split.batches(batch_size):
        output = model.forward(stacks)
        loss, task, kl = model.loss(output, labels).values()
        accumulator.update(model.predict(output, renormalize), labels, loss, task, kl)
        terms = model.bound_terms(output, labels)
        if terms is not None:
            accumulator.update_bound(-(terms[0] + terms[1]))
    return _record(accumulator, step, split_name)


def _train_step(model: AggregationModel, state: AdamState, stacks, labels, epoch: int, step: int):
    tape = Tape()
    output = model.forward(stacks, tape)
    breakdown = model.loss(output, labels)
    loss, task, kl = breakdown.values()
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at epoch {epoch + 1}, step {step}")

    grads = named_gradients(backward(breakdown.total, tape), tape)
    trainable = model.store.trainable_names
    updated = adam_step({n: model.store[n] for n in trainable}, grads, state)
    for name, value in updated.items():
        model.store.set(name, value)
    return output, (loss, task, kl)


def train(
    config: RunConfig,
    dataset: SynthDataset,
    kind: Optional[ModelKind] = None,
    show_progress: Optional[bool] = None,
) -> TrainResult:
    """
    Train one model and keep the best-validation parameters.

    Args:
        config: Run configuration
        dataset: Benchmark splits
        kind: Model kind; defaults to ``config.model.kind``
        show_progress: tqdm bar over batches; defaults to ``settings.SHOW_PROGRESS``

    Returns:
        The best model, its checkpoint and the metric stream (train and val per
        epoch, then test for the selected parameters)

    Raises:
        DivergenceError: If the training loss becomes non-finite
        FrozenParameterError: If a frozen parameter changed
    """
    kind = ModelKind(kind or config.model.kind)
    show_progress = settings.SHOW_PROGRESS if show_progress is None else show_progress
    model = ModelFactory.create(config, kind)
    state = AdamState.from_settings(
        config.optim, {prefix: config.optim.aggregator_lr_scale for prefix in WEIGHTING_PREFIXES}
    )
    frozen = frozen_snapshot(model.store)
    train_split, val_split = dataset.split("train"), dataset.split("val")

    best_store = model.store.copy()
    best_epoch: Optional[int] = None
    best_metric: Optional[float] = None
    best_step = 0
    metrics: List[MetricRecord] = []
    step = 0

    try:
        for epoch in range(config.optim.epochs):
            order = epoch_order(config.seed, epoch, len(train_split))
            batches = train_split.batches(config.optim.batch_size, order)
            if show_progress:
                total = -(-len(train_split) // config.optim.batch_size)
                batches = tqdm(batches, total=total, desc=f"{kind.value} epoch {epoch + 1}")
            running = EvaluationAccumulator()
            for stacks, labels in batches:
                step += 1
                output, values = _train_step(model, state, stacks, labels, epoch, step)
                running.update(model.predict(output), labels, *values)
            metrics.append(_record(running, step, "train"))

            val_record = evaluate(model, val_split, step, "val")
            metrics.append(val_record)
            logger.info(
                f"[{kind.value}] epoch {epoch + 1}/{config.optim.epochs} "
                f"train_loss={metrics[-2].loss:.4f} val_acc={val_record.accuracy:.4f}"
            )
            # strict improvement keeps the earliest epoch on ties
            if best_metric is None or val_record.accuracy > best_metric:
                best_metric = val_record.accuracy
                best_epoch = epoch + 1
                best_step = step
                best_store = model.store.copy()
    except DivergenceError as e:
        logger.error(f"Training of {kind.value} diverged: {e}", exc_info=True)
        raise
    check_frozen(model.store, frozen)

    model = ModelFactory.from_store(kind, config, best_store)
    metrics.append(evaluate(model, dataset.split("test"), best_step, "test"))
    checkpoint = Checkpoint.from_store(
        kind, best_store, config, step=best_step, best_epoch=best_epoch, best_metric=best_metric
    )
    return TrainResult(model=model, checkpoint=checkpoint, metrics=metrics)


def save_run(result: TrainResult, checkpoint_path: str, metrics_path: str) -> None:
    CheckpointRepository.save(result.checkpoint, checkpoint_path)
    MetricsRepository.write(result.metrics, metrics_path)


def compare(
    config: RunConfig,
    dataset: SynthDataset,
    kinds: Sequence[ModelKind] = tuple(ModelKind),
) -> CompareReport:
    """
    Train every model kind on the same data and report test metrics.

    Checkpoints, metric streams and per-sample weight exports are written next
    to the configured paths with the kind appended to the file stem; the report
    itself goes to ``<exports>/compare.json``.
    """
    paths = config.paths
    entries = []
    for kind in kinds:
        result = train(config, dataset, kind)
        checkpoint_path = kind_path(paths.checkpoint, kind)
        save_run(result, checkpoint_path, kind_path(paths.metrics, kind))
        weights_path = str(Path(paths.exports) / f"weights-{ModelKind(kind).value}.csv")
        write_weight_rows(result.model, dataset.split("test"), weights_path)
        test = result.test_record
        entries.append(
            CompareEntry(
                kind=kind,
                test_accuracy=test.accuracy,
                weighted_f1=test.weighted_f1,
                val_accuracy=result.checkpoint.best_metric,
                best_epoch=result.checkpoint.best_epoch,
                weights_path=weights_path,
                checkpoint_path=checkpoint_path,
            )
        )
        logger.info(f"[{ModelKind(kind).value}] test accuracy {test.accuracy:.4f}")

    report = CompareReport(
        seed=config.seed,
        backbone=config.model.backbone_mode,
        oracle_accuracy=oracle_probe_accuracy(dataset),
        entries=entries,
    )
    _write_json(report.model_dump(mode="json"), Path(paths.exports) / "compare.json")
    return report


def grid_points(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of dotted-key value lists, keys in sorted order."""
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(
    config: RunConfig,
    dataset: SynthDataset,
    grid: Dict[str, List[Any]],
    kind: Optional[ModelKind] = None,
) -> SweepReport:
    """
    Grid runner: train once per grid point and rank by validation accuracy.

    Ranking is stable, so the earliest grid point wins ties. The leaderboard is
    written to ``<exports>/sweep.json``.
    """
    kind = ModelKind(kind or config.model.kind)
    fixed = [k for k in grid if k.split(".")[0] in FIXED_SECTIONS]
    if fixed:
        raise ConfigError(f"Sweep cannot vary dataset or path keys: {', '.join(sorted(fixed))}")
    entries = []
    for i, point in enumerate(grid_points(grid)):
        run_config = apply_overrides(config, point.items())
        logger.info(f"Sweep run {i + 1}: {point}")
        result = train(run_config, dataset, kind)
        checkpoint_path = tagged_path(config.paths.checkpoint, f"{kind.value}-sweep{i}")
        CheckpointRepository.save(result.checkpoint, checkpoint_path)
        entries.append(
            SweepEntry(
                overrides=point,
                val_accuracy=result.checkpoint.best_metric if result.checkpoint.best_metric is not None else 0.0,
                test_accuracy=result.test_record.accuracy,
                best_epoch=result.checkpoint.best_epoch,
                checkpoint_path=checkpoint_path,
            )
        )
    ranked = sorted(entries, key=lambda e: -e.val_accuracy)
    report = SweepReport(kind=kind, entries=ranked)
    _write_json(report.model_dump(mode="json"), Path(config.paths.exports) / "sweep.json")
    return report


def _write_json(document: Dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
