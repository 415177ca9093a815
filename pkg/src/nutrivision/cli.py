"""Command-line front end: train, evaluate, predict, synth, inspect.

Exit codes are fixed for scripting: 0 success, 1 configuration or usage
error, 2 data error (unreadable manifest/image/checkpoint, empty split),
3 training divergence. Every failure prints a single diagnostic line to
stderr of the form ``error: <category>: <message>``.

Each subcommand accepts ``--config FILE`` naming a JSON object whose keys
are flag names (underscore form); explicit command-line flags override
file values. When the ``NUTRIVISION_DATA_DIR`` environment variable is
set, relative ``--manifest`` and ``--image`` paths resolve against it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .backbones import BackboneConfig, canonical_kind, _TRANSFORMER_KINDS
from .dataio import (
    DEFAULT_SPLIT_FRACTIONS,
    DatasetManifest,
    load_image,
    load_manifest,
    split_dataset,
    TASKS,
    TASK_UNITS,
)
from .errors import (
    ConfigurationError,
    DataError,
    DivergenceError,
)
from .evaluation import evaluate, render_table
from .model import HeadConfig, ModelConfig, parameter_count, build_model
from .synthdata import MANIFEST_NAME, SynthSpec, generate
from .training import (
    TrainConfig,
    fit,
    load_checkpoint,
    restore_training_state,
    save_checkpoint,
)

DATA_DIR_ENV = "NUTRIVISION_DATA_DIR"

CHECKPOINT_NAME = "checkpoint.npz"
HISTORY_NAME = "history.jsonl"
REPORT_NAME = "report.json"
CONFIG_NAME = "config.json"


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures routed through the exit-code scheme."""

    def error(self, message):
        raise _UsageError(self, message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _data_path(raw: str) -> Path:
    """Resolve a data path, honoring the data-directory environment variable
    for relative paths."""
    path = Path(raw)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", metavar="FILE", default=None,
        help="JSON file of flag defaults (explicit flags win)",
    )


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backbone", choices=("vit", "mae", "conv-residual", "tiny"), default="vit",
        help="feature extractor kind",
    )
    parser.add_argument(
        "--head", choices=("full", "compressed"), default="full", help="head topology"
    )
    parser.add_argument("--feature-dim", type=int, default=None)
    parser.add_argument(
        "--shared-widths", type=_int_list, default=None, metavar="W1[,W2]",
        help="shared layer widths (two for full, one for compressed)",
    )
    parser.add_argument("--task-width", type=int, default=None, help="full head only")
    parser.add_argument("--attention-heads", type=int, default=None, help="transformer kinds only")
    parser.add_argument(
        "--hidden-layers", type=int, default=None,
        help="transformer blocks, or residual blocks for conv-residual",
    )
    parser.add_argument("--patch-size", type=int, default=None, help="transformer kinds only")
    parser.add_argument("--resolution", type=int, default=None, help="input image side length")
    parser.add_argument("--pretrained-weights", metavar="FILE", default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--learning-rate", type=float, default=1e-4)
    parser.add_argument("--rms-discount", type=float, default=0.9)
    parser.add_argument("--epsilon", type=float, default=1.0)
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--weight-decay", type=float, default=0.0)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--max-epochs", type=int, default=100)
    parser.add_argument("--early-stop-patience", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--freeze-backbone", action="store_true")
    parser.add_argument("--workers", type=int, default=0)


def _add_split_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--split-fractions", type=_float_list, default=None, metavar="TRAIN,VAL,TEST",
        help="fractions used when the manifest has no split assignment",
    )
    parser.add_argument("--split-seed", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="nutrivision", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    p_train = commands.add_parser("train", parents=[], help="train a model on a manifest")
    p_train.add_argument("--manifest", required=True, metavar="FILE")
    _add_model_flags(p_train)
    _add_train_flags(p_train)
    _add_split_flags(p_train)
    p_train.add_argument("--out", default="nutrivision-run", metavar="DIR")
    p_train.add_argument("--label", default=None, help="model label used in reports")
    _add_config_flag(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = commands.add_parser("evaluate", help="report per-task and combined MAE")
    p_eval.add_argument("--checkpoint", required=True, metavar="FILE")
    p_eval.add_argument("--manifest", required=True, metavar="FILE")
    p_eval.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p_eval.add_argument("--format", choices=("text", "csv", "markdown", "json"), default="text")
    p_eval.add_argument("--batch-size", type=int, default=32)
    p_eval.add_argument("--workers", type=int, default=0)
    p_eval.add_argument("--out", default=None, metavar="FILE", help="write instead of printing")
    _add_split_flags(p_eval)
    _add_config_flag(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_predict = commands.add_parser("predict", help="predict nutrients for one image")
    p_predict.add_argument("--checkpoint", required=True, metavar="FILE")
    p_predict.add_argument("--image", required=True, metavar="FILE")
    _add_config_flag(p_predict)
    p_predict.set_defaults(func=cmd_predict)

    p_synth = commands.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True, metavar="DIR")
    p_synth.add_argument("--count", type=int, default=64)
    p_synth.add_argument("--resolution", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    _add_config_flag(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_inspect = commands.add_parser("inspect", help="describe a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True, metavar="FILE")
    _add_config_flag(p_inspect)
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    """Overlay values from ``--config`` JSON onto defaults the command line
    left untouched."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config file {str(path)!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {str(path)!r} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {str(path)!r} must hold a JSON object")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func", "config") or not hasattr(args, dest):
            raise ConfigurationError(f"config file key {key!r} is not a flag of this command")
        flag = "--" + dest.replace("_", "-")
        given = any(a == flag or a.startswith(flag + "=") for a in argv)
        if not given:
            if isinstance(value, list):
                value = tuple(value)
            setattr(args, dest, value)


def _model_config_from_args(args: argparse.Namespace) -> ModelConfig:
    kind = canonical_kind(args.backbone)
    transformer = kind in _TRANSFORMER_KINDS
    backbone = BackboneConfig(
        kind=kind,
        feature_dim=args.feature_dim,
        attention_heads=args.attention_heads if transformer else None,
        hidden_layers=args.hidden_layers,
        patch_size=args.patch_size if transformer else None,
        resolution=args.resolution,
    )
    if not transformer and (args.attention_heads is not None or args.patch_size is not None):
        raise ConfigurationError(
            "--attention-heads and --patch-size apply only to transformer backbones"
        )
    head = HeadConfig(
        kind=args.head,
        shared_widths=args.shared_widths,
        task_width=args.task_width,
    )
    return ModelConfig(backbone=backbone, head=head, seed=args.seed)


def _train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.learning_rate,
        rms_discount=args.rms_discount,
        epsilon=args.epsilon,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        early_stop_patience=args.early_stop_patience,
        seed=args.seed,
        freeze_backbone=args.freeze_backbone,
        workers=args.workers,
    )


def _ensure_split(
    manifest: DatasetManifest,
    fractions: tuple[float, ...] | None,
    seed: int | None,
) -> tuple[DatasetManifest, tuple[float, ...], int]:
    fractions = tuple(fractions) if fractions is not None else DEFAULT_SPLIT_FRACTIONS
    seed = int(seed) if seed is not None else 0
    if manifest.split_assignment is None:
        manifest = split_dataset(manifest, fractions, seed)
    return manifest, fractions, seed


def cmd_train(args: argparse.Namespace) -> int:
    manifest = load_manifest(_data_path(args.manifest))
    manifest, fractions, split_seed = _ensure_split(manifest, args.split_fractions, args.split_seed)
    model_config = _model_config_from_args(args).resolved()
    train_config = _train_config_from_args(args)
    label = args.label if args.label else f"{args.backbone}/{args.head}"

    echo = {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "split_fractions": list(fractions),
        "split_seed": split_seed,
        "label": label,
        "out": args.out,
    }
    print("config: " + json.dumps(echo, sort_keys=True))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")

    model = build_model(model_config, weights=args.pretrained_weights)
    extras = {"split_fractions": list(fractions), "split_seed": split_seed, "label": label}
    result = fit(
        model,
        manifest,
        train_config,
        log_path=out / HISTORY_NAME,
        checkpoint_extras=extras,
    )
    save_checkpoint(result.best, out / CHECKPOINT_NAME)

    best_model = restore_training_state(result.best)[0] if len(result.history) else result.model
    report = evaluate(
        best_model, manifest, "val", batch_size=train_config.batch_size,
        workers=train_config.workers, label=label,
    )
    (out / REPORT_NAME).write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(
        f"trained {len(result.history)} epoch(s); best epoch {result.best.epoch}, "
        f"val combined MAE {result.best.best_val_combined_mae:.6g}; artifacts in {out}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_data_path(args.manifest))
    if manifest.split_assignment is None and args.split != "all":
        extras = checkpoint.extras
        fractions = (
            args.split_fractions
            if args.split_fractions is not None
            else extras.get("split_fractions", DEFAULT_SPLIT_FRACTIONS)
        )
        seed = (
            args.split_seed if args.split_seed is not None else extras.get("split_seed", 0)
        )
        manifest = split_dataset(manifest, tuple(fractions), int(seed))
    model = restore_training_state(checkpoint)[0]
    report = evaluate(
        model,
        manifest,
        None if args.split == "all" else args.split,
        batch_size=args.batch_size,
        workers=args.workers,
        label=checkpoint.extras.get("label", "model"),
    )
    if args.format == "json":
        rendered = json.dumps(report.as_dict(), indent=2) + "\n"
    else:
        rendered = render_table([report], format=args.format)
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
    else:
        print(rendered, end="")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_training_state(checkpoint)[0]
    image = load_image(_data_path(args.image), model.input_resolution)
    prediction = model.predict(image.pixels[None])[0]
    for task, unit, value in zip(TASKS, TASK_UNITS, prediction):
        print(f"{task}: {value:.1f} {unit}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(count=args.count, resolution=args.resolution, seed=args.seed)
    manifest = generate(spec, args.out)
    print(f"wrote {len(manifest)} images and {Path(args.out) / MANIFEST_NAME}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_training_state(checkpoint)[0]
    info = {
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "parameter_count": {
            scope: parameter_count(model, scope)
            for scope in ("all", "head_only", "backbone_only")
        },
        "epoch": checkpoint.epoch,
        "best_val_combined_mae": checkpoint.best_val_combined_mae,
        "extras": checkpoint.extras,
    }
    print(json.dumps(info, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, argv)
        return args.func(args)
    except _UsageError as exc:
        print(exc.parser.format_usage(), end="", file=sys.stderr)
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
