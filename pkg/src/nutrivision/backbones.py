"""Image feature extractors and their weight files.

Every extractor maps a float batch (B, 3, R, R) to features (B, feature_dim)
and exposes three attributes: ``kind``, ``feature_dim``, and
``input_resolution``. Inputs of any other shape raise ``ShapeError``.

Kinds:

* ``vit``: patch-embedding transformer encoder; the feature is the class
  token after the final layer norm.
* ``mae_encoder``: the same encoder run on the full (unmasked) patch
  sequence; the feature is the mean over patch tokens. Weight files for
  this kind may carry reconstruction-decoder arrays, which are validated
  against their expected shapes but never loaded into a module.
* ``conv_residual``: a 4-stage residual convolutional network.
* ``tiny_test``: a two-convolution extractor small enough for tests.

Weight files are ``.npz`` archives holding named parameter/buffer arrays
plus the backbone configuration as JSON, so a file is self-describing and
loads fail loudly on any shape mismatch.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ShapeError, WeightLoadError

BACKBONE_KINDS = ("vit", "mae_encoder", "conv_residual", "tiny_test")

# Short names accepted at API boundaries (CLI, estimator).
BACKBONE_ALIASES = {
    "vit": "vit",
    "mae": "mae_encoder",
    "mae_encoder": "mae_encoder",
    "conv-residual": "conv_residual",
    "conv_residual": "conv_residual",
    "tiny": "tiny_test",
    "tiny_test": "tiny_test",
}

WEIGHTS_FORMAT_VERSION = 1

_TRANSFORMER_KINDS = ("vit", "mae_encoder")


def canonical_kind(name: str) -> str:
    try:
        return BACKBONE_ALIASES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown backbone {name!r}, expected one of {sorted(BACKBONE_ALIASES)}"
        ) from None


@dataclass(frozen=True)
class BackboneConfig:
    """Backbone selection plus size knobs; ``None`` fields take kind defaults.

    ``hidden_layers`` counts transformer blocks for the transformer kinds
    and residual blocks for ``conv_residual``. The ``decoder_*`` fields
    describe the reconstruction decoder that accompanies ``mae_encoder``
    weight files; they size shape validation only.
    """

    kind: str = "vit"
    feature_dim: int | None = None
    attention_heads: int | None = None
    hidden_layers: int | None = None
    patch_size: int | None = None
    resolution: int | None = None
    decoder_dim: int | None = None
    decoder_heads: int | None = None
    decoder_layers: int | None = None


_KIND_DEFAULTS = {
    "vit": dict(feature_dim=768, attention_heads=12, hidden_layers=12, patch_size=16, resolution=224),
    "mae_encoder": dict(
        feature_dim=768,
        attention_heads=12,
        hidden_layers=12,
        patch_size=16,
        resolution=224,
        decoder_dim=512,
        decoder_heads=16,
        decoder_layers=8,
    ),
    "conv_residual": dict(feature_dim=512, hidden_layers=8, resolution=224),
    "tiny_test": dict(feature_dim=32, resolution=64),
}


def resolve_backbone_config(config: BackboneConfig) -> BackboneConfig:
    """Fill kind defaults, reject irrelevant fields, validate the rest."""
    kind = canonical_kind(config.kind)
    defaults = _KIND_DEFAULTS[kind]
    resolved: dict[str, int] = {}
    for fld in dataclasses.fields(BackboneConfig):
        if fld.name == "kind":
            continue
        given = getattr(config, fld.name)
        if fld.name not in defaults:
            if given is not None:
                raise ConfigurationError(
                    f"option {fld.name!r} does not apply to backbone kind {kind!r}"
                )
            continue
        value = defaults[fld.name] if given is None else int(given)
        if value <= 0:
            raise ConfigurationError(f"{fld.name} must be positive, got {given!r}")
        resolved[fld.name] = value

    if kind in _TRANSFORMER_KINDS:
        if resolved["feature_dim"] % resolved["attention_heads"] != 0:
            raise ConfigurationError(
                f"feature_dim {resolved['feature_dim']} is not divisible by "
                f"attention_heads {resolved['attention_heads']}"
            )
        if resolved["resolution"] % resolved["patch_size"] != 0:
            raise ConfigurationError(
                f"resolution {resolved['resolution']} is not divisible by "
                f"patch_size {resolved['patch_size']}"
            )
    if kind == "mae_encoder" and resolved["decoder_dim"] % resolved["decoder_heads"] != 0:
        raise ConfigurationError(
            f"decoder_dim {resolved['decoder_dim']} is not divisible by "
            f"decoder_heads {resolved['decoder_heads']}"
        )
    return BackboneConfig(kind=kind, **resolved)


def _check_input(x: torch.Tensor, resolution: int, kind: str) -> None:
    expected = (3, resolution, resolution)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(
            f"{kind} backbone expects input (B, 3, {resolution}, {resolution}), "
            f"got {tuple(x.shape)}"
        )


class TinyTestExtractor(nn.Module):
    """Small deterministic extractor used to keep tests fast."""

    def __init__(self, feature_dim: int = 32, input_resolution: int = 64):
        super().__init__()
        self.kind = "tiny_test"
        self.feature_dim = feature_dim
        self.input_resolution = input_resolution
        self.conv1 = nn.Conv2d(3, 8, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(16, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.input_resolution, self.kind)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = self.pool(x).flatten(1)
        return self.proj(x)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: attention then a GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VisionTransformerExtractor(nn.Module):
    """Patch-embedding transformer encoder.

    The token sequence is [class token, patch tokens] with a learned
    position embedding. ``pool`` picks the output feature: ``"cls"`` takes
    the class token, ``"mean"`` averages the patch tokens; both read the
    sequence after the final layer norm.
    """

    def __init__(
        self,
        feature_dim: int = 768,
        attention_heads: int = 12,
        num_blocks: int = 12,
        patch_size: int = 16,
        input_resolution: int = 224,
        pool: str = "cls",
    ):
        super().__init__()
        if pool not in ("cls", "mean"):
            raise ConfigurationError(f"pool must be 'cls' or 'mean', got {pool!r}")
        self.kind = "vit" if pool == "cls" else "mae_encoder"
        self.feature_dim = feature_dim
        self.attention_heads = attention_heads
        self.num_blocks = num_blocks
        self.patch_size = patch_size
        self.input_resolution = input_resolution
        self.pool = pool
        self.num_patches = (input_resolution // patch_size) ** 2

        self.patch_embed = nn.Conv2d(3, feature_dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, feature_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, feature_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(feature_dim, attention_heads) for _ in range(num_blocks)
        )
        self.norm = nn.LayerNorm(feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.input_resolution, self.kind)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        if self.pool == "cls":
            return tokens[:, 0]
        return tokens[:, 1:].mean(dim=1)


class _ResidualBlock(nn.Module):
    """3x3-conv residual block; ``stride=2`` halves resolution and projects
    the shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class ConvResidualExtractor(nn.Module):
    """Four-stage residual CNN; ``hidden_layers`` residual blocks total,
    spread as evenly as possible across the stages (earlier stages first)."""

    _STAGE_CHANNELS = (64, 128, 256, 512)

    def __init__(self, feature_dim: int = 512, hidden_layers: int = 8, input_resolution: int = 224):
        super().__init__()
        if hidden_layers < len(self._STAGE_CHANNELS):
            raise ConfigurationError(
                f"hidden_layers must be >= {len(self._STAGE_CHANNELS)} "
                f"(one block per stage), got {hidden_layers}"
            )
        self.kind = "conv_residual"
        self.feature_dim = feature_dim
        self.hidden_layers = hidden_layers
        self.input_resolution = input_resolution

        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(),
        )
        base, extra = divmod(hidden_layers, len(self._STAGE_CHANNELS))
        stages = []
        in_channels = 32
        for i, channels in enumerate(self._STAGE_CHANNELS):
            count = base + (1 if i < extra else 0)
            blocks = [_ResidualBlock(in_channels, channels, stride=2)]
            blocks += [_ResidualBlock(channels, channels) for _ in range(count - 1)]
            stages.append(nn.Sequential(*blocks))
            in_channels = channels
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(in_channels, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.input_resolution, self.kind)
        x = self.stages(self.stem(x))
        return self.proj(self.pool(x).flatten(1))


def make_extractor(config: BackboneConfig) -> nn.Module:
    """Instantiate the extractor for a (possibly partial) config, as float64.

    Parameters come out with torch's default initialization; seeded
    re-initialization is the model builder's job.
    """
    cfg = resolve_backbone_config(config)
    if cfg.kind in _TRANSFORMER_KINDS:
        module = VisionTransformerExtractor(
            feature_dim=cfg.feature_dim,
            attention_heads=cfg.attention_heads,
            num_blocks=cfg.hidden_layers,
            patch_size=cfg.patch_size,
            input_resolution=cfg.resolution,
            pool="cls" if cfg.kind == "vit" else "mean",
        )
    elif cfg.kind == "conv_residual":
        module = ConvResidualExtractor(
            feature_dim=cfg.feature_dim,
            hidden_layers=cfg.hidden_layers,
            input_resolution=cfg.resolution,
        )
    else:
        module = TinyTestExtractor(feature_dim=cfg.feature_dim, input_resolution=cfg.resolution)
    return module.double()


def masked_decoder_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Expected array shapes for the reconstruction decoder of an
    ``mae_encoder`` weight file.

    The decoder projects encoder features to ``decoder_dim``, runs
    ``decoder_layers`` transformer blocks over [class token, patch tokens]
    with its own position embedding and mask token, and predicts
    ``patch_size**2 * 3`` pixel values per patch. Only these shapes are
    ever used; no decoder module exists.
    """
    cfg = resolve_backbone_config(config)
    if cfg.kind != "mae_encoder":
        raise ConfigurationError(
            f"decoder shapes only apply to kind 'mae_encoder', got {cfg.kind!r}"
        )
    d = cfg.decoder_dim
    patches = (cfg.resolution // cfg.patch_size) ** 2
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (d, cfg.feature_dim),
        "embed.bias": (d,),
        "mask_token": (1, 1, d),
        "pos_embed": (1, patches + 1, d),
    }
    for i in range(cfg.decoder_layers):
        prefix = f"blocks.{i}."
        shapes[prefix + "norm1.weight"] = (d,)
        shapes[prefix + "norm1.bias"] = (d,)
        shapes[prefix + "attn.in_proj_weight"] = (3 * d, d)
        shapes[prefix + "attn.in_proj_bias"] = (3 * d,)
        shapes[prefix + "attn.out_proj.weight"] = (d, d)
        shapes[prefix + "attn.out_proj.bias"] = (d,)
        shapes[prefix + "norm2.weight"] = (d,)
        shapes[prefix + "norm2.bias"] = (d,)
        shapes[prefix + "mlp.0.weight"] = (4 * d, d)
        shapes[prefix + "mlp.0.bias"] = (4 * d,)
        shapes[prefix + "mlp.2.weight"] = (d, 4 * d)
        shapes[prefix + "mlp.2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["pred.weight"] = (cfg.patch_size**2 * 3, d)
    shapes["pred.bias"] = (cfg.patch_size**2 * 3,)
    return shapes


def backbone_state_arrays(extractor: nn.Module) -> dict[str, np.ndarray]:
    """All parameters and persistent buffers as named float64 arrays."""
    arrays = {f"param:{n}": p.detach().cpu().numpy() for n, p in extractor.named_parameters()}
    arrays |= {f"buffer:{n}": b.detach().cpu().numpy() for n, b in extractor.named_buffers()}
    return arrays


def save_backbone_weights(
    extractor: nn.Module,
    config: BackboneConfig,
    path: str | Path,
    *,
    decoder_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a self-describing weight file.

    ``decoder_arrays`` (names without prefix, e.g. ``"norm.weight"``) are
    stored alongside encoder weights for ``mae_encoder`` files; they are
    shape-checked against ``masked_decoder_shapes`` on load.
    """
    cfg = resolve_backbone_config(config)
    payload = dict(backbone_state_arrays(extractor))
    if decoder_arrays:
        if cfg.kind != "mae_encoder":
            raise ConfigurationError("decoder arrays only belong in 'mae_encoder' weight files")
        payload |= {f"decoder:{name}": arr for name, arr in decoder_arrays.items()}
    payload["config"] = np.array(json.dumps(dataclasses.asdict(cfg)))
    payload["format_version"] = np.array(WEIGHTS_FORMAT_VERSION)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig
    arrays: dict[str, np.ndarray]
    decoder_arrays: dict[str, np.ndarray]


def load_backbone_weights(path: str | Path) -> BackboneWeights:
    """Read a weight file and validate its decoder arrays, if any."""
    try:
        with np.load(path, allow_pickle=False) as data:
            payload = {name: data[name] for name in data.files}
    except (OSError, ValueError, KeyError) as exc:
        raise WeightLoadError(f"cannot read weight file {str(path)!r}: {exc}") from exc

    version = payload.pop("format_version", None)
    if version is None or int(version) != WEIGHTS_FORMAT_VERSION:
        raise WeightLoadError(
            f"unsupported weight file version {None if version is None else int(version)!r} "
            f"in {str(path)!r} (expected {WEIGHTS_FORMAT_VERSION})"
        )
    try:
        config = BackboneConfig(**json.loads(str(payload.pop("config"))))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise WeightLoadError(f"weight file {str(path)!r} has no readable config: {exc}") from exc

    encoder = {k: v for k, v in payload.items() if k.startswith(("param:", "buffer:"))}
    decoder = {k.removeprefix("decoder:"): v for k, v in payload.items() if k.startswith("decoder:")}

    bundle = BackboneWeights(
        config=resolve_backbone_config(config),
        arrays=encoder,
        decoder_arrays=decoder,
    )
    _validate_decoder_arrays(bundle)
    return bundle


def _validate_decoder_arrays(bundle: BackboneWeights) -> None:
    if not bundle.decoder_arrays:
        return
    if bundle.config.kind != "mae_encoder":
        raise WeightLoadError(
            f"decoder arrays present but backbone kind is {bundle.config.kind!r}"
        )
    expected = masked_decoder_shapes(bundle.config)
    problems = []
    for name, shape in expected.items():
        if name not in bundle.decoder_arrays:
            problems.append(f"missing decoder array {name!r} (expected shape {shape})")
        elif tuple(bundle.decoder_arrays[name].shape) != shape:
            problems.append(
                f"decoder array {name!r}: expected shape {shape}, "
                f"got {tuple(bundle.decoder_arrays[name].shape)}"
            )
    for name in sorted(set(bundle.decoder_arrays) - set(expected)):
        problems.append(f"unexpected decoder array {name!r}")
    if problems:
        raise WeightLoadError("decoder validation failed:\n  " + "\n  ".join(problems))


def apply_backbone_weights(extractor: nn.Module, bundle: BackboneWeights) -> None:
    """Copy a bundle's encoder arrays into an extractor, all-or-nothing.

    Every parameter and buffer must be present with exactly the right
    shape; the error lists every discrepancy at once.
    """
    current = backbone_state_arrays(extractor)
    problems = []
    for name, arr in current.items():
        if name not in bundle.arrays:
            problems.append(f"missing array {name!r} (expected shape {tuple(arr.shape)})")
        elif tuple(bundle.arrays[name].shape) != tuple(arr.shape):
            problems.append(
                f"array {name!r}: expected shape {tuple(arr.shape)}, "
                f"got {tuple(bundle.arrays[name].shape)}"
            )
    for name in sorted(set(bundle.arrays) - set(current)):
        problems.append(f"unexpected array {name!r}")
    if problems:
        raise WeightLoadError("weight loading failed:\n  " + "\n  ".join(problems))

    with torch.no_grad():
        params = dict(extractor.named_parameters())
        for name, tensor in params.items():
            tensor.copy_(torch.from_numpy(bundle.arrays[f"param:{name}"]))
        for name, tensor in extractor.named_buffers():
            tensor.copy_(torch.from_numpy(bundle.arrays[f"buffer:{name}"]))
