"""Shared fixtures: a small on-disk synthetic dataset and model builders."""

import numpy as np
import pytest

from nutrivision import BackboneConfig, HeadConfig, ModelConfig, SynthSpec, build_model, generate
from nutrivision.dataio import load_image, split_dataset


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """16 synthetic 32x32 images plus their manifest."""
    out = tmp_path_factory.mktemp("synth")
    generate(SynthSpec(count=16, resolution=32, seed=5), out)
    return out


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    from nutrivision.dataio import load_manifest

    return load_manifest(synth_dir / "manifest.csv")


@pytest.fixture(scope="session")
def split_manifest(synth_manifest):
    return split_dataset(synth_manifest, (0.5, 0.25, 0.25), seed=0)


@pytest.fixture(scope="session")
def synth_arrays(synth_manifest):
    """All 16 images and targets as float64 arrays at resolution 32."""
    images = np.stack(
        [
            load_image(synth_manifest.resolve_ref(s.image_ref), 32).pixels
            for s in synth_manifest
        ]
    )
    return images, synth_manifest.targets_array()


def tiny_model_config(seed: int = 0, head: str = "compressed", resolution: int = 32) -> ModelConfig:
    widths = (16,) if head == "compressed" else (16, 16)
    task_width = None if head == "compressed" else 8
    return ModelConfig(
        backbone=BackboneConfig(kind="tiny_test", resolution=resolution),
        head=HeadConfig(kind=head, shared_widths=widths, task_width=task_width),
        seed=seed,
    )


@pytest.fixture
def tiny_model():
    return build_model(tiny_model_config())
