"""Extractor contracts: shapes, configuration resolution, weight files,
and decoder shape validation."""

import dataclasses

import numpy as np
import pytest
import torch

from nutrivision.backbones import (
    BackboneConfig,
    BackboneWeights,
    backbone_state_arrays,
    canonical_kind,
    load_backbone_weights,
    make_extractor,
    masked_decoder_shapes,
    resolve_backbone_config,
    save_backbone_weights,
)
from nutrivision.errors import ConfigurationError, ShapeError, WeightLoadError
from nutrivision.model import build_backbone

SMALL_VIT = BackboneConfig(
    kind="vit", feature_dim=16, attention_heads=2, hidden_layers=1, patch_size=8, resolution=16
)
SMALL_MAE = BackboneConfig(
    kind="mae_encoder",
    feature_dim=16,
    attention_heads=2,
    hidden_layers=1,
    patch_size=8,
    resolution=16,
    decoder_dim=8,
    decoder_heads=2,
    decoder_layers=1,
)
SMALL_CONV = BackboneConfig(kind="conv_residual", feature_dim=8, hidden_layers=4, resolution=32)
SMALL_TINY = BackboneConfig(kind="tiny_test", feature_dim=12, resolution=16)


def small_batch(resolution, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0, 1, (batch, 3, resolution, resolution)))


class TestKinds:
    @pytest.mark.parametrize(
        "alias, kind",
        [
            ("vit", "vit"),
            ("mae", "mae_encoder"),
            ("mae_encoder", "mae_encoder"),
            ("conv-residual", "conv_residual"),
            ("conv_residual", "conv_residual"),
            ("tiny", "tiny_test"),
            ("tiny_test", "tiny_test"),
        ],
    )
    def test_aliases(self, alias, kind):
        assert canonical_kind(alias) == kind

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown backbone"):
            canonical_kind("resnet")


class TestConfigResolution:
    def test_vit_defaults(self):
        cfg = resolve_backbone_config(BackboneConfig(kind="vit"))
        assert (cfg.feature_dim, cfg.attention_heads, cfg.hidden_layers) == (768, 12, 12)
        assert (cfg.patch_size, cfg.resolution) == (16, 224)

    def test_mae_defaults_include_decoder(self):
        cfg = resolve_backbone_config(BackboneConfig(kind="mae"))
        assert (cfg.decoder_dim, cfg.decoder_heads, cfg.decoder_layers) == (512, 16, 8)

    def test_conv_and_tiny_defaults(self):
        conv = resolve_backbone_config(BackboneConfig(kind="conv-residual"))
        assert (conv.feature_dim, conv.hidden_layers, conv.resolution) == (512, 8, 224)
        tiny = resolve_backbone_config(BackboneConfig(kind="tiny"))
        assert (tiny.feature_dim, tiny.resolution) == (32, 64)

    def test_irrelevant_field_rejected(self):
        with pytest.raises(ConfigurationError, match="attention_heads"):
            resolve_backbone_config(BackboneConfig(kind="tiny", attention_heads=4))

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigurationError, match="not divisible"):
            resolve_backbone_config(BackboneConfig(kind="vit", feature_dim=10, attention_heads=3))

    def test_patch_divisibility_enforced(self):
        with pytest.raises(ConfigurationError, match="not divisible"):
            resolve_backbone_config(BackboneConfig(kind="vit", resolution=100, patch_size=16))

    def test_non_positive_rejected(self):
        with pytest.raises(ConfigurationError, match="positive"):
            resolve_backbone_config(BackboneConfig(kind="tiny", feature_dim=0))


class TestForwardContracts:
    @pytest.mark.parametrize(
        "config",
        [SMALL_VIT, SMALL_MAE, SMALL_CONV, SMALL_TINY],
        ids=lambda c: c.kind,
    )
    def test_output_shape_and_dtype(self, config):
        extractor = make_extractor(config)
        cfg = resolve_backbone_config(config)
        out = extractor(small_batch(cfg.resolution))
        assert out.shape == (2, cfg.feature_dim)
        assert out.dtype == torch.float64
        assert torch.isfinite(out).all()

    @pytest.mark.parametrize(
        "config",
        [SMALL_VIT, SMALL_CONV, SMALL_TINY],
        ids=lambda c: c.kind,
    )
    def test_wrong_resolution_raises(self, config):
        extractor = make_extractor(config)
        cfg = resolve_backbone_config(config)
        with pytest.raises(ShapeError, match=str(cfg.resolution)):
            extractor(small_batch(cfg.resolution + 8))

    def test_wrong_rank_raises(self):
        extractor = make_extractor(SMALL_TINY)
        with pytest.raises(ShapeError):
            extractor(torch.zeros(3, 16, 16, dtype=torch.float64))

    def test_wrong_channels_raises(self):
        extractor = make_extractor(SMALL_TINY)
        with pytest.raises(ShapeError):
            extractor(torch.zeros(1, 1, 16, 16, dtype=torch.float64))

    def test_cls_and_mean_pooling_differ(self):
        vit = build_backbone(SMALL_VIT, seed=3)
        mae = build_backbone(SMALL_MAE, seed=3)
        x = small_batch(16)
        with torch.no_grad():
            assert not torch.allclose(vit(x), mae(x))

    def test_exposes_contract_attributes(self):
        extractor = make_extractor(SMALL_CONV)
        assert extractor.kind == "conv_residual"
        assert extractor.feature_dim == 8
        assert extractor.input_resolution == 32

    def test_conv_residual_needs_one_block_per_stage(self):
        with pytest.raises(ConfigurationError, match="hidden_layers"):
            make_extractor(dataclasses.replace(SMALL_CONV, hidden_layers=3))


class TestBuildDeterminism:
    def test_same_seed_same_outputs(self):
        x = small_batch(16)
        with torch.no_grad():
            a = build_backbone(SMALL_VIT, seed=11)(x)
            b = build_backbone(SMALL_VIT, seed=11)(x)
        assert torch.equal(a, b)

    def test_different_seed_differs(self):
        x = small_batch(16)
        with torch.no_grad():
            a = build_backbone(SMALL_VIT, seed=11)(x)
            b = build_backbone(SMALL_VIT, seed=12)(x)
        assert not torch.equal(a, b)


class TestWeightFiles:
    def test_round_trip_restores_outputs_bitwise(self, tmp_path):
        donor = build_backbone(SMALL_TINY, seed=21)
        path = tmp_path / "weights.npz"
        save_backbone_weights(donor, SMALL_TINY, path)
        restored = build_backbone(SMALL_TINY, seed=99, weights=path)
        x = small_batch(16)
        with torch.no_grad():
            assert torch.equal(donor(x), restored(x))

    def test_config_mismatch_rejected(self, tmp_path):
        donor = build_backbone(SMALL_TINY, seed=0)
        path = tmp_path / "weights.npz"
        save_backbone_weights(donor, SMALL_TINY, path)
        other = dataclasses.replace(SMALL_TINY, feature_dim=16)
        with pytest.raises(WeightLoadError, match="requested backbone"):
            build_backbone(other, weights=path)

    def test_shape_mismatch_lists_array_names(self):
        from nutrivision.backbones import apply_backbone_weights

        donor = build_backbone(SMALL_TINY, seed=0)
        arrays = backbone_state_arrays(donor)
        arrays["param:proj.weight"] = arrays["param:proj.weight"][:, :4]
        del arrays["param:proj.bias"]
        bundle = BackboneWeights(
            config=resolve_backbone_config(SMALL_TINY), arrays=arrays, decoder_arrays={}
        )
        target = build_backbone(SMALL_TINY, seed=1)
        with pytest.raises(WeightLoadError) as excinfo:
            apply_backbone_weights(target, bundle)
        message = str(excinfo.value)
        assert "param:proj.weight" in message and "param:proj.bias" in message

    def test_unreadable_file_raises(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(WeightLoadError, match="cannot read"):
            load_backbone_weights(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(WeightLoadError):
            load_backbone_weights(tmp_path / "absent.npz")


class TestDecoderShapes:
    def test_small_config_shapes(self):
        shapes = masked_decoder_shapes(SMALL_MAE)
        # 4 patches of 8x8 at resolution 16; decoder_dim 8.
        assert shapes["embed.weight"] == (8, 16)
        assert shapes["pos_embed"] == (1, 5, 8)
        assert shapes["mask_token"] == (1, 1, 8)
        assert shapes["blocks.0.attn.in_proj_weight"] == (24, 8)
        assert shapes["blocks.0.mlp.0.weight"] == (32, 8)
        assert shapes["pred.weight"] == (8 * 8 * 3, 8)

    def test_default_config_array_count(self):
        shapes = masked_decoder_shapes(BackboneConfig(kind="mae"))
        # 4 standalone arrays + 12 per block * 8 blocks + norm pair + pred pair.
        assert len(shapes) == 4 + 12 * 8 + 4
        assert shapes["embed.weight"] == (512, 768)
        assert shapes["pred.weight"] == (16 * 16 * 3, 512)

    def test_only_mae_kind_has_decoder(self):
        with pytest.raises(ConfigurationError, match="mae_encoder"):
            masked_decoder_shapes(SMALL_VIT)

    def test_valid_decoder_arrays_accepted(self, tmp_path):
        donor = build_backbone(SMALL_MAE, seed=2)
        decoder = {name: np.zeros(shape) for name, shape in masked_decoder_shapes(SMALL_MAE).items()}
        path = tmp_path / "mae.npz"
        save_backbone_weights(donor, SMALL_MAE, path, decoder_arrays=decoder)
        bundle = load_backbone_weights(path)
        assert set(bundle.decoder_arrays) == set(decoder)

    def test_decoder_shape_mismatch_named(self, tmp_path):
        donor = build_backbone(SMALL_MAE, seed=2)
        decoder = {name: np.zeros(shape) for name, shape in masked_decoder_shapes(SMALL_MAE).items()}
        decoder["pred.weight"] = np.zeros((1, 1))
        path = tmp_path / "mae.npz"
        save_backbone_weights(donor, SMALL_MAE, path, decoder_arrays=decoder)
        with pytest.raises(WeightLoadError, match="pred.weight"):
            load_backbone_weights(path)

    def test_missing_decoder_array_named(self, tmp_path):
        donor = build_backbone(SMALL_MAE, seed=2)
        decoder = {name: np.zeros(shape) for name, shape in masked_decoder_shapes(SMALL_MAE).items()}
        decoder.pop("mask_token")
        path = tmp_path / "mae.npz"
        save_backbone_weights(donor, SMALL_MAE, path, decoder_arrays=decoder)
        with pytest.raises(WeightLoadError, match="missing decoder array 'mask_token'"):
            load_backbone_weights(path)

    def test_unexpected_decoder_array_named(self, tmp_path):
        donor = build_backbone(SMALL_MAE, seed=2)
        decoder = {name: np.zeros(shape) for name, shape in masked_decoder_shapes(SMALL_MAE).items()}
        decoder["extra.bias"] = np.zeros(3)
        path = tmp_path / "mae.npz"
        save_backbone_weights(donor, SMALL_MAE, path, decoder_arrays=decoder)
        with pytest.raises(WeightLoadError, match="unexpected decoder array 'extra.bias'"):
            load_backbone_weights(path)

    def test_decoder_arrays_refused_for_other_kinds(self, tmp_path):
        donor = build_backbone(SMALL_VIT, seed=2)
        with pytest.raises(ConfigurationError, match="mae_encoder"):
            save_backbone_weights(
                donor, SMALL_VIT, tmp_path / "w.npz", decoder_arrays={"x": np.zeros(1)}
            )

    def test_decoder_arrays_never_enter_the_module(self, tmp_path):
        donor = build_backbone(SMALL_MAE, seed=2)
        decoder = {name: np.zeros(shape) for name, shape in masked_decoder_shapes(SMALL_MAE).items()}
        path = tmp_path / "mae.npz"
        save_backbone_weights(donor, SMALL_MAE, path, decoder_arrays=decoder)
        restored = build_backbone(SMALL_MAE, seed=7, weights=path)
        names = {name for name, _ in restored.named_parameters()}
        assert not any(name.startswith("decoder") for name in names)
        x = small_batch(16)
        with torch.no_grad():
            assert torch.equal(donor(x), restored(x))
