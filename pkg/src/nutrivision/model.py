"""Regression heads, the assembled model, and seeded construction.

A model is backbone + head. Heads map features (B, F) to predictions
(B, 5) in fixed task order through one of two topologies:

* ``full``: two shared fully connected layers, then a per-task fully
  connected layer and a per-task linear output. Defaults: shared widths
  (4096, 4096), task width 4096.
* ``compressed``: one shared fully connected layer, then five linear
  outputs. Default shared width (4096,).

Hidden layers use ReLU; outputs are unclamped linear units. Each task's
prediction depends only on the shared trunk and that task's own layers.

Construction is deterministic: one seeded generator initializes every
parameter in ``named_parameters`` order. Matrix-shaped weights draw
uniformly from ±1/sqrt(fan_in), biases start at zero, norm scales at one,
and token/position embeddings draw uniformly from ±0.02.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbones import (
    BackboneConfig,
    apply_backbone_weights,
    load_backbone_weights,
    make_extractor,
    resolve_backbone_config,
)
from .dataio import NUM_TASKS
from .errors import ConfigurationError, WeightLoadError
from .validation import check_image_batch

HEAD_KINDS = ("full", "compressed")

DEFAULT_FULL_SHARED = (4096, 4096)
DEFAULT_FULL_TASK_WIDTH = 4096
DEFAULT_COMPRESSED_SHARED = (4096,)


@dataclass(frozen=True)
class HeadConfig:
    """Head topology selection; ``None`` fields take the kind's defaults."""

    kind: str = "full"
    shared_widths: tuple[int, ...] | None = None
    task_width: int | None = None

    def __post_init__(self):
        if self.shared_widths is not None:
            object.__setattr__(self, "shared_widths", tuple(int(w) for w in self.shared_widths))


def resolve_head_config(config: HeadConfig) -> HeadConfig:
    if config.kind not in HEAD_KINDS:
        raise ConfigurationError(f"unknown head kind {config.kind!r}, expected one of {HEAD_KINDS}")
    if config.kind == "full":
        shared = config.shared_widths if config.shared_widths is not None else DEFAULT_FULL_SHARED
        task_width = config.task_width if config.task_width is not None else DEFAULT_FULL_TASK_WIDTH
        if len(shared) != 2:
            raise ConfigurationError(
                f"a full head takes exactly 2 shared widths, got {len(shared)}"
            )
    else:
        shared = (
            config.shared_widths if config.shared_widths is not None else DEFAULT_COMPRESSED_SHARED
        )
        if len(shared) != 1:
            raise ConfigurationError(
                f"a compressed head takes exactly 1 shared width, got {len(shared)}"
            )
        if config.task_width is not None:
            raise ConfigurationError("a compressed head has no per-task layer; task_width must be unset")
        task_width = None
    if any(w < 1 for w in shared) or (task_width is not None and task_width < 1):
        raise ConfigurationError(f"head widths must be >= 1, got shared={shared} task={task_width}")
    return HeadConfig(kind=config.kind, shared_widths=tuple(shared), task_width=task_width)


class FullHead(nn.Module):
    """Two shared FC layers, then a per-task FC layer and scalar output."""

    def __init__(self, feature_dim: int, shared_widths: Sequence[int], task_width: int):
        super().__init__()
        w1, w2 = shared_widths
        self.shared = nn.Sequential(nn.Linear(feature_dim, w1), nn.ReLU(), nn.Linear(w1, w2), nn.ReLU())
        self.task_layers = nn.ModuleList(nn.Linear(w2, task_width) for _ in range(NUM_TASKS))
        self.outputs = nn.ModuleList(nn.Linear(task_width, 1) for _ in range(NUM_TASKS))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h = self.shared(features)
        columns = [
            out(torch.relu(task(h)))
            for task, out in zip(self.task_layers, self.outputs)
        ]
        return torch.cat(columns, dim=1)


class CompressedHead(nn.Module):
    """One shared FC layer feeding five independent scalar outputs."""

    def __init__(self, feature_dim: int, shared_widths: Sequence[int]):
        super().__init__()
        (w1,) = shared_widths
        self.shared = nn.Sequential(nn.Linear(feature_dim, w1), nn.ReLU())
        self.outputs = nn.ModuleList(nn.Linear(w1, 1) for _ in range(NUM_TASKS))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h = self.shared(features)
        return torch.cat([out(h) for out in self.outputs], dim=1)


def make_head(config: HeadConfig, feature_dim: int) -> nn.Module:
    cfg = resolve_head_config(config)
    if cfg.kind == "full":
        head = FullHead(feature_dim, cfg.shared_widths, cfg.task_width)
    else:
        head = CompressedHead(feature_dim, cfg.shared_widths)
    return head.double()


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = BackboneConfig()
    head: HeadConfig = HeadConfig()
    seed: int = 0

    def resolved(self) -> "ModelConfig":
        return ModelConfig(
            backbone=resolve_backbone_config(self.backbone),
            head=resolve_head_config(self.head),
            seed=int(self.seed),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        try:
            return cls(
                backbone=BackboneConfig(**data["backbone"]),
                head=HeadConfig(**data["head"]),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model config: {exc}") from exc


class NutritionModel(nn.Module):
    """Backbone + head; maps image batches to five nutrient predictions."""

    def __init__(self, backbone: nn.Module, head: nn.Module, config: ModelConfig):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.config = config

    @property
    def input_resolution(self) -> int:
        return self.backbone.input_resolution

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(images))

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Predict (N, 5) nutrients for an (N, 3, R, R) image array."""
        images = check_image_batch(images, self.input_resolution)
        was_training = self.training
        self.eval()
        try:
            chunks = [
                self(torch.from_numpy(images[start : start + batch_size])).numpy()
                for start in range(0, images.shape[0], batch_size)
            ]
        finally:
            self.train(was_training)
        return np.concatenate(chunks, axis=0)


def _fan_in(shape: torch.Size) -> int:
    n = 1
    for dim in shape[1:]:
        n *= dim
    return n


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded in-place initialization, in ``named_parameters`` order."""
    generator = torch.Generator().manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, param in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("cls_token", "pos_embed", "mask_token"):
                param.uniform_(-0.02, 0.02, generator=generator)
            elif leaf.endswith("bias"):
                param.zero_()
            elif param.ndim >= 2:
                bound = 1.0 / float(_fan_in(param.shape)) ** 0.5
                param.uniform_(-bound, bound, generator=generator)
            else:
                param.fill_(1.0)


def build_backbone(
    config: BackboneConfig, seed: int = 0, weights: str | Path | None = None
) -> nn.Module:
    """Build and seed-initialize an extractor, optionally loading weights.

    A weight file must describe the same resolved configuration it is
    being loaded into.
    """
    cfg = resolve_backbone_config(config)
    extractor = make_extractor(cfg)
    init_parameters(extractor, seed)
    if weights is not None:
        bundle = load_backbone_weights(weights)
        if bundle.config != cfg:
            raise WeightLoadError(
                f"weight file was built for {bundle.config}, but the requested backbone is {cfg}"
            )
        apply_backbone_weights(extractor, bundle)
    return extractor


def build_model(config: ModelConfig, weights: str | Path | None = None) -> NutritionModel:
    """Assemble a model; one generator seeded by ``config.seed`` covers all
    parameters, so equal configs always produce identical weights."""
    cfg = config.resolved()
    backbone = make_extractor(cfg.backbone)
    head = make_head(cfg.head, backbone.feature_dim)
    model = NutritionModel(backbone, head, cfg)
    init_parameters(model, cfg.seed)
    if weights is not None:
        bundle = load_backbone_weights(weights)
        if bundle.config != cfg.backbone:
            raise WeightLoadError(
                f"weight file was built for {bundle.config}, "
                f"but the requested backbone is {cfg.backbone}"
            )
        apply_backbone_weights(backbone, bundle)
    return model


def parameter_count(module: nn.Module, scope: str = "all") -> int:
    """Number of parameters in a model or submodule.

    ``scope`` narrows a ``NutritionModel`` to ``"head_only"`` or
    ``"backbone_only"``; ``"all"`` counts everything.
    """
    if scope not in ("all", "head_only", "backbone_only"):
        raise ValueError(f"unknown scope {scope!r}")
    if scope != "all":
        if not isinstance(module, NutritionModel):
            raise ValueError(f"scope {scope!r} requires an assembled model")
        module = module.head if scope == "head_only" else module.backbone
    return sum(p.numel() for p in module.parameters())
