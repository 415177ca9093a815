"""The epoch loop: optimizer wiring, history, checkpoints, early stopping.

Training minimizes the combined MAE through its analytic subgradient.
Each batch's predictions feed ``loss_gradient`` and the result is pushed
backward through the network, so autograd handles everything behind the
output layer while the loss derivative itself stays the documented sign
rule.

Determinism: with a fixed config (including seed) a run is bit-for-bit
reproducible, and resuming from a checkpoint continues the identical
trajectory. Batch order is a pure function of (seed, epoch), so no RNG
state needs to be carried across interruptions.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .dataio import NUM_TASKS, TASKS, Batch, DatasetManifest, array_batches, batches
from .errors import CheckpointError, ConfigurationError, DivergenceError, EmptySplitError
from .evaluation import EvalReport, evaluate, evaluate_arrays
from .losses import LossBreakdown, loss_gradient, multitask_loss
from .model import ModelConfig, NutritionModel, build_model
from .optim import RMSPropMomentum

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``early_stop_patience`` counts consecutive epochs without a new best
    validation combined MAE; 0 disables early stopping. ``resolution``
    defaults to the model's input resolution. ``weight_decay`` is a true
    L2 coefficient and defaults to 0; the squared-gradient discounting
    lives in ``rms_discount``.
    """

    learning_rate: float = 1e-4
    rms_discount: float = 0.9
    epsilon: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    freeze_backbone: bool = False
    resolution: int | None = None
    workers: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"malformed train config: {exc}") from exc


def validate_train_config(config: TrainConfig) -> TrainConfig:
    if not (math.isfinite(config.learning_rate) and config.learning_rate > 0):
        raise ConfigurationError(f"learning_rate must be positive, got {config.learning_rate!r}")
    if not 0.0 <= config.rms_discount < 1.0:
        raise ConfigurationError(f"rms_discount must be in [0, 1), got {config.rms_discount!r}")
    if not (math.isfinite(config.epsilon) and config.epsilon > 0):
        raise ConfigurationError(f"epsilon must be positive, got {config.epsilon!r}")
    if not (math.isfinite(config.momentum) and config.momentum >= 0):
        raise ConfigurationError(f"momentum must be non-negative, got {config.momentum!r}")
    if not (math.isfinite(config.weight_decay) and config.weight_decay >= 0):
        raise ConfigurationError(f"weight_decay must be non-negative, got {config.weight_decay!r}")
    if config.batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {config.batch_size}")
    if config.max_epochs < 0:
        raise ConfigurationError(f"max_epochs must be >= 0, got {config.max_epochs}")
    if config.early_stop_patience < 0:
        raise ConfigurationError(
            f"early_stop_patience must be >= 0, got {config.early_stop_patience}"
        )
    if config.workers < 0:
        raise ConfigurationError(f"workers must be >= 0, got {config.workers}")
    if config.resolution is not None and config.resolution < 1:
        raise ConfigurationError(f"resolution must be positive, got {config.resolution}")
    return config


def make_optimizer(config: TrainConfig, parameters: Iterable) -> RMSPropMomentum:
    """Build the optimizer from a validated config."""
    validate_train_config(config)
    return RMSPropMomentum(
        parameters,
        lr=config.learning_rate,
        rms_discount=config.rms_discount,
        epsilon=config.epsilon,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: EvalReport
    seconds: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_mae": self.train.as_dict(),
            "val_mae": dict(zip(TASKS, self.val.per_task_mae)),
            "val_combined_mae": self.val.combined_mae,
            "seconds": self.seconds,
        }


@dataclass(frozen=True)
class TrainHistory:
    """Consecutive epoch records; a fresh run starts at epoch 1."""

    records: tuple[EpochRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for prev, rec in zip((None,) + self.records, self.records):
            if prev is None:
                if rec.epoch < 1:
                    raise ValueError(f"epoch indices start at 1, got {rec.epoch}")
            elif rec.epoch != prev.epoch + 1:
                raise ValueError(
                    f"epoch indices must be consecutive, got {prev.epoch} then {rec.epoch}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to restore a run: configs, weights, optimizer
    state, the epoch it was captured after, and the best validation
    combined MAE seen so far. ``extras`` carries JSON provenance (for
    instance split fractions) that commands may need later."""

    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    best_val_combined_mae: float
    arrays: dict[str, np.ndarray]
    extras: dict


def capture_checkpoint(
    model: NutritionModel,
    optimizer: RMSPropMomentum,
    train_config: TrainConfig,
    epoch: int,
    best_val_combined_mae: float,
    extras: dict | None = None,
) -> Checkpoint:
    """Deep-copy the training state into an in-memory checkpoint."""
    arrays: dict[str, np.ndarray] = {}
    name_of = {}
    for name, param in model.named_parameters():
        arrays[f"param:{name}"] = param.detach().cpu().numpy().copy()
        name_of[param] = name
    for name, buf in model.named_buffers():
        arrays[f"buffer:{name}"] = buf.detach().cpu().numpy().copy()
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if state:
                name = name_of[param]
                arrays[f"opt:square_avg:{name}"] = state["square_avg"].cpu().numpy().copy()
                arrays[f"opt:momentum:{name}"] = state["momentum_buffer"].cpu().numpy().copy()
    return Checkpoint(
        model_config=model.config,
        train_config=train_config,
        epoch=epoch,
        best_val_combined_mae=best_val_combined_mae,
        arrays=arrays,
        extras=dict(extras or {}),
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint atomically (temp file, then rename)."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": checkpoint.epoch,
        "best_val_combined_mae": checkpoint.best_val_combined_mae,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "extras": checkpoint.extras,
    }
    payload = dict(checkpoint.arrays)
    payload["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint; any corruption raises, leaving no partial state."""
    try:
        with np.load(path, allow_pickle=False) as data:
            payload = {name: data[name] for name in data.files}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {str(path)!r}: {exc}") from exc
    try:
        meta = json.loads(str(payload.pop("meta")))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {str(path)!r} has no readable metadata") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r} in {str(path)!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        return Checkpoint(
            model_config=ModelConfig.from_dict(meta["model_config"]),
            train_config=TrainConfig.from_dict(meta["train_config"]),
            epoch=int(meta["epoch"]),
            best_val_combined_mae=float(meta["best_val_combined_mae"]),
            arrays=payload,
            extras=dict(meta.get("extras", {})),
        )
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise CheckpointError(f"checkpoint {str(path)!r} is malformed: {exc}") from exc


def _trainable_parameters(model: NutritionModel, config: TrainConfig) -> list[torch.nn.Parameter]:
    if config.freeze_backbone:
        for param in model.backbone.parameters():
            param.requires_grad_(False)
        return list(model.head.parameters())
    return list(model.parameters())


def restore_training_state(
    checkpoint: Checkpoint,
) -> tuple[NutritionModel, RMSPropMomentum]:
    """Rebuild the model and optimizer a checkpoint was captured from."""
    model = build_model(checkpoint.model_config)
    try:
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(torch.from_numpy(checkpoint.arrays[f"param:{name}"]))
            for name, buf in model.named_buffers():
                buf.copy_(torch.from_numpy(checkpoint.arrays[f"buffer:{name}"]))
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match its own model config: {exc}") from exc
    optimizer = make_optimizer(
        checkpoint.train_config, _trainable_parameters(model, checkpoint.train_config)
    )
    named = dict(model.named_parameters())
    for name, param in named.items():
        sq_key, mom_key = f"opt:square_avg:{name}", f"opt:momentum:{name}"
        if sq_key in checkpoint.arrays:
            optimizer.state[param] = {
                "square_avg": torch.from_numpy(checkpoint.arrays[sq_key].copy()),
                "momentum_buffer": torch.from_numpy(checkpoint.arrays[mom_key].copy()),
            }
    return model, optimizer


@dataclass(frozen=True)
class FitResult:
    model: NutritionModel
    history: TrainHistory
    best: Checkpoint


class _LogWriter:
    """Append-as-you-go JSON-lines writer; no-op without a path."""

    def __init__(self, path: str | Path | None, mode: str):
        self._fh = open(path, mode, encoding="utf-8") if path is not None else None

    def write(self, record: EpochRecord) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record.as_dict()) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _train_one_epoch(
    model: NutritionModel,
    optimizer: RMSPropMomentum,
    batch_iter: Iterator[Batch],
    epoch: int,
) -> LossBreakdown:
    """Run one epoch of updates; returns the one-pass train MAE computed
    from each batch's pre-update predictions."""
    error_sums = np.zeros(NUM_TASKS, dtype=np.float64)
    count = 0
    model.train()
    for step, batch in enumerate(batch_iter, start=1):
        optimizer.zero_grad(set_to_none=True)
        preds = model(torch.from_numpy(batch.images))
        preds_np = preds.detach().cpu().numpy()
        if not np.isfinite(preds_np).all():
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step
            )
        error_sums += np.abs(batch.targets - preds_np).sum(axis=0)
        count += len(batch)
        grad = loss_gradient(batch.targets, preds_np)
        preds.backward(gradient=torch.from_numpy(grad))
        optimizer.step()
    per_task = tuple(float(v) for v in error_sums / count)
    return LossBreakdown(per_task=per_task, total=float(sum(per_task)))


def _fit_loop(
    model: NutritionModel,
    optimizer: RMSPropMomentum,
    config: TrainConfig,
    train_batches_for_epoch: Callable[[int], Iterator[Batch]],
    evaluate_validation: Callable[[], EvalReport],
    *,
    start_epoch: int,
    best_val: float,
    log_path: str | Path | None,
    log_mode: str,
    extras: dict | None,
) -> FitResult:
    records: list[EpochRecord] = []
    best = capture_checkpoint(model, optimizer, config, start_epoch - 1, best_val, extras)
    stale_epochs = 0
    log = _LogWriter(log_path, log_mode)
    try:
        for epoch in range(start_epoch, config.max_epochs + 1):
            started = time.perf_counter()
            train_loss = _train_one_epoch(
                model, optimizer, train_batches_for_epoch(epoch), epoch
            )
            val_report = evaluate_validation()
            record = EpochRecord(
                epoch=epoch,
                train=train_loss,
                val=val_report,
                seconds=time.perf_counter() - started,
            )
            records.append(record)
            log.write(record)
            if val_report.combined_mae < best_val:
                best_val = val_report.combined_mae
                best = capture_checkpoint(model, optimizer, config, epoch, best_val, extras)
                stale_epochs = 0
            else:
                stale_epochs += 1
                if config.early_stop_patience and stale_epochs >= config.early_stop_patience:
                    break
    finally:
        log.close()
    return FitResult(model=model, history=TrainHistory(tuple(records)), best=best)


def fit(
    model: NutritionModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    log_path: str | Path | None = None,
    checkpoint_extras: dict | None = None,
) -> FitResult:
    """Train on a manifest's train split, validating on its val split.

    The returned ``best`` checkpoint holds the weights with the lowest
    validation combined MAE; the model itself is left at its last-epoch
    state.
    """
    validate_train_config(config)
    for split in ("train", "val"):
        if not manifest.split_samples(split):
            raise EmptySplitError(f"empty split: {split!r} contains no samples")
    resolution = config.resolution if config.resolution is not None else model.input_resolution
    optimizer = make_optimizer(config, _trainable_parameters(model, config))

    def train_batches(epoch: int) -> Iterator[Batch]:
        return batches(
            manifest,
            "train",
            config.batch_size,
            shuffle=True,
            seed=config.seed,
            epoch=epoch,
            resolution=resolution,
            workers=config.workers,
        )

    def eval_val() -> EvalReport:
        return evaluate(
            model,
            manifest,
            "val",
            batch_size=config.batch_size,
            resolution=resolution,
            workers=config.workers,
        )

    return _fit_loop(
        model,
        optimizer,
        config,
        train_batches,
        eval_val,
        start_epoch=1,
        best_val=math.inf,
        log_path=log_path,
        log_mode="w",
        extras=checkpoint_extras,
    )


def fit_arrays(
    model: NutritionModel,
    train_images: np.ndarray,
    train_targets: np.ndarray,
    val_images: np.ndarray,
    val_targets: np.ndarray,
    config: TrainConfig,
    *,
    log_path: str | Path | None = None,
    checkpoint_extras: dict | None = None,
) -> FitResult:
    """Train on in-memory arrays; same loop and semantics as ``fit``."""
    validate_train_config(config)
    if train_images.shape[0] == 0 or val_images.shape[0] == 0:
        raise EmptySplitError("empty split: both train and val arrays need samples")
    optimizer = make_optimizer(config, _trainable_parameters(model, config))

    def train_batches(epoch: int) -> Iterator[Batch]:
        return array_batches(
            train_images, train_targets, config.batch_size, shuffle=True,
            seed=config.seed, epoch=epoch,
        )

    def eval_val() -> EvalReport:
        return evaluate_arrays(model, val_images, val_targets, batch_size=config.batch_size)

    return _fit_loop(
        model,
        optimizer,
        config,
        train_batches,
        eval_val,
        start_epoch=1,
        best_val=math.inf,
        log_path=log_path,
        log_mode="w",
        extras=checkpoint_extras,
    )


def resume_fit(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    *,
    log_path: str | Path | None = None,
    max_epochs: int | None = None,
) -> FitResult:
    """Continue a run from a checkpoint, bit-compatible with never having
    stopped. History and log cover only the newly run epochs; the log file
    is appended to, not truncated. ``max_epochs`` extends (or shrinks) the
    stored epoch budget."""
    model, optimizer = restore_training_state(checkpoint)
    config = checkpoint.train_config
    if max_epochs is not None:
        config = dataclasses.replace(config, max_epochs=max_epochs)
        validate_train_config(config)
    for split in ("train", "val"):
        if not manifest.split_samples(split):
            raise EmptySplitError(f"empty split: {split!r} contains no samples")
    resolution = config.resolution if config.resolution is not None else model.input_resolution

    def train_batches(epoch: int) -> Iterator[Batch]:
        return batches(
            manifest,
            "train",
            config.batch_size,
            shuffle=True,
            seed=config.seed,
            epoch=epoch,
            resolution=resolution,
            workers=config.workers,
        )

    def eval_val() -> EvalReport:
        return evaluate(
            model,
            manifest,
            "val",
            batch_size=config.batch_size,
            resolution=resolution,
            workers=config.workers,
        )

    return _fit_loop(
        model,
        optimizer,
        config,
        train_batches,
        eval_val,
        start_epoch=checkpoint.epoch + 1,
        best_val=checkpoint.best_val_combined_mae,
        log_path=log_path,
        log_mode="a",
        extras=checkpoint.extras,
    )
