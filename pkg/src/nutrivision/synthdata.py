"""Synthetic image/label datasets with labels computable from pixels alone.

Each generated image is a seeded composition of colored rectangles. Its
label is an affine function of the image's exact channel means, so any
script that re-reads an image can recover its labels independently, and a
small model can fit the mapping quickly. Generation is single-threaded and
byte-deterministic: the same spec always produces identical PNG bytes and
an identical manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import NUM_TASKS, DatasetManifest, NutrientVector, Sample, write_manifest

# Default label map: every task reads the mean brightness (equal channel
# slopes summing to 1) at a task-specific scale, intercepts zero. Channel
# means of (0.5, 0.5, 0.5) therefore yield (500, 250, 50, 25, 100).
DEFAULT_SCALES = (1000.0, 500.0, 100.0, 50.0, 200.0)
DEFAULT_SLOPES = tuple(tuple(s / 3.0 for _ in range(3)) for s in DEFAULT_SCALES)
DEFAULT_INTERCEPTS = (0.0, 0.0, 0.0, 0.0, 0.0)

MANIFEST_NAME = "manifest.csv"
SPEC_NAME = "synth_spec.json"


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters.

    ``slopes`` is the 5x3 matrix mapping (mean R, mean G, mean B) to the
    five targets; ``intercepts`` the added constants. Coefficients must
    keep every reachable label non-negative (channel means live in
    [0, 1]), which holds iff intercept + sum of negative slopes >= 0 per
    task.
    """

    count: int = 64
    resolution: int = 64
    seed: int = 0
    slopes: tuple[tuple[float, float, float], ...] = DEFAULT_SLOPES
    intercepts: tuple[float, ...] = DEFAULT_INTERCEPTS

    def __post_init__(self):
        object.__setattr__(
            self, "slopes", tuple(tuple(float(v) for v in row) for row in self.slopes)
        )
        object.__setattr__(self, "intercepts", tuple(float(v) for v in self.intercepts))
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if len(self.slopes) != NUM_TASKS or any(len(row) != 3 for row in self.slopes):
            raise ValueError(f"slopes must be {NUM_TASKS} rows of 3 coefficients")
        if len(self.intercepts) != NUM_TASKS:
            raise ValueError(f"expected {NUM_TASKS} intercepts, got {len(self.intercepts)}")
        for row, intercept in zip(self.slopes, self.intercepts):
            if not all(math.isfinite(v) for v in (*row, intercept)):
                raise ValueError("label map coefficients must be finite")
            worst = intercept + sum(min(v, 0.0) for v in row)
            if worst < 0:
                raise ValueError(
                    f"label map can go negative (worst case {worst!r}); "
                    "raise the intercept or the slopes"
                )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(
            count=int(data["count"]),
            resolution=int(data["resolution"]),
            seed=int(data["seed"]),
            slopes=tuple(tuple(row) for row in data["slopes"]),
            intercepts=tuple(data["intercepts"]),
        )


def labels_for_image(spec: SynthSpec, pixels_uint8: np.ndarray) -> NutrientVector:
    """Apply the label map to an (H, W, 3) uint8 image's exact channel means."""
    if pixels_uint8.ndim != 3 or pixels_uint8.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image array, got {pixels_uint8.shape}")
    means = pixels_uint8.reshape(-1, 3).astype(np.float64).mean(axis=0) / 255.0
    values = np.asarray(spec.slopes, dtype=np.float64) @ means + np.asarray(
        spec.intercepts, dtype=np.float64
    )
    return NutrientVector.from_array(values)


def _compose_image(spec: SynthSpec, index: int) -> np.ndarray:
    """Render image ``index``: background plus 2..5 filled rectangles.

    Each image draws from its own child seed, so image ``i`` is identical
    no matter what ``count`` is.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(index,))
    )
    res = spec.resolution
    canvas = np.empty((res, res, 3), dtype=np.uint8)
    canvas[:] = rng.integers(0, 256, size=3, dtype=np.uint8)
    for _ in range(int(rng.integers(2, 6))):
        y0, y1 = sorted(int(v) for v in rng.integers(0, res, size=2))
        x0, x1 = sorted(int(v) for v in rng.integers(0, res, size=2))
        canvas[y0 : y1 + 1, x0 : x1 + 1] = rng.integers(0, 256, size=3, dtype=np.uint8)
    return canvas


def generate(spec: SynthSpec, output_dir: str | Path) -> DatasetManifest:
    """Write ``spec.count`` PNGs, a manifest, and the spec JSON.

    Labels are computed from each final image's exact channel means, so
    re-reading any PNG reproduces its manifest row. Returns the manifest
    with ``base_dir`` set to ``output_dir``.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(spec.count):
        pixels = _compose_image(spec, i)
        name = f"synth_{i:04d}.png"
        Image.fromarray(pixels, mode="RGB").save(out / name, format="PNG")
        samples.append(Sample(image_ref=name, label=labels_for_image(spec, pixels)))
    manifest = DatasetManifest(samples=tuple(samples), base_dir=out)
    write_manifest(manifest, out / MANIFEST_NAME)
    (out / SPEC_NAME).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest
