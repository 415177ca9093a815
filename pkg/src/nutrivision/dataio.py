"""Dataset manifests, image loading, split assignment, and deterministic batching.

Manifest format: UTF-8 CSV with the exact header
``image_path,calories_kcal,mass_g,protein_g,fat_g,carb_g``, one sample per
row. Relative image paths are resolved against the manifest's directory.

Images are decoded to RGB, resized with Pillow's bilinear filter in float
mode (so downscaling averages over the full source footprint with no 8-bit
quantization), and scaled into [0, 1] by dividing by 255. No per-channel
mean/std normalization is applied.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence, TextIO

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    EmptySplitError,
    ImageDecodeError,
    ManifestDuplicateError,
    ManifestFormatError,
    ManifestRowError,
)

TASKS = ("calories", "mass", "protein", "fat", "carbohydrates")
TASK_UNITS = ("kcal", "g", "g", "g", "g")
NUM_TASKS = len(TASKS)

MANIFEST_COLUMNS = ("image_path", "calories_kcal", "mass_g", "protein_g", "fat_g", "carb_g")
SPLITS = ("train", "val", "test")

DEFAULT_RESOLUTION = 224
DEFAULT_SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class NutrientVector:
    """The five regression targets, in fixed task order.

    Order is [calories (kcal), mass (g), protein (g), fat (g),
    carbohydrates (g)] everywhere: manifest columns, target arrays,
    model output columns, and report columns.
    """

    calories: float
    mass: float
    protein: float
    fat: float
    carbohydrates: float

    def __post_init__(self):
        for name, value in zip(TASKS, self.as_tuple()):
            if not math.isfinite(value):
                raise ValueError(f"nutrient '{name}' must be finite, got {value!r}")
            if value < 0:
                raise ValueError(f"nutrient '{name}' must be non-negative, got {value!r}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.calories, self.mass, self.protein, self.fat, self.carbohydrates)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "NutrientVector":
        values = tuple(float(v) for v in values)
        if len(values) != NUM_TASKS:
            raise ValueError(f"expected {NUM_TASKS} nutrient values, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True)
class Sample:
    image_ref: str
    label: NutrientVector

    def __post_init__(self):
        if not self.image_ref:
            raise ValueError("image_ref must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of samples, optionally with a split assignment.

    ``base_dir`` is where relative image refs resolve from; it is excluded
    from equality so a manifest round-trips through CSV field-for-field.
    """

    samples: tuple[Sample, ...]
    split_assignment: dict[str, str] | None = None
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        refs = [s.image_ref for s in self.samples]
        if len(set(refs)) != len(refs):
            seen = set()
            dup = next(r for r in refs if r in seen or seen.add(r))
            raise ManifestDuplicateError(f"duplicate image_path {dup!r}")
        if self.split_assignment is not None:
            unknown = set(self.split_assignment.values()) - set(SPLITS)
            if unknown:
                raise ValueError(f"unknown split names: {sorted(unknown)}")
            missing = set(refs) - set(self.split_assignment)
            if missing:
                raise ValueError(f"{len(missing)} samples missing a split assignment")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def split_samples(self, split: str | None) -> tuple[Sample, ...]:
        """Samples of one split in manifest order; ``None`` selects all."""
        if split is None:
            return self.samples
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        if self.split_assignment is None:
            return ()
        return tuple(s for s in self.samples if self.split_assignment[s.image_ref] == split)

    def targets_array(self, split: str | None = None) -> np.ndarray:
        samples = self.split_samples(split)
        if not samples:
            return np.zeros((0, NUM_TASKS), dtype=np.float64)
        return np.stack([s.label.as_array() for s in samples])

    def resolve_ref(self, ref: str) -> Path:
        path = Path(ref)
        if not path.is_absolute() and self.base_dir is not None:
            return self.base_dir / path
        return path


@dataclass(frozen=True)
class ImageTensor:
    """One decoded image: float64 (3, R, R) with values in [0, 1]."""

    pixels: np.ndarray
    source_ref: str


@dataclass(frozen=True)
class Batch:
    """A batch of images (B, 3, H, W) with targets (B, 5) in task order."""

    images: np.ndarray
    targets: np.ndarray
    refs: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"batch shapes disagree: images {self.images.shape}, targets {self.targets.shape}"
            )
        if self.images.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")

    def __len__(self) -> int:
        return self.images.shape[0]


def parse_manifest(text: str | TextIO, base_dir: str | Path | None = None) -> DatasetManifest:
    """Parse manifest CSV from a string or character stream."""
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestFormatError("manifest is empty: missing header row") from None

    if tuple(header) != MANIFEST_COLUMNS:
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        extra = [c for c in header if c not in MANIFEST_COLUMNS]
        if missing:
            raise ManifestFormatError(f"missing column(s): {', '.join(missing)}")
        if extra:
            raise ManifestFormatError(f"unexpected column(s): {', '.join(extra)}")
        raise ManifestFormatError(
            f"column order must be exactly: {','.join(MANIFEST_COLUMNS)}"
        )

    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            raise ManifestRowError(f"empty row at line {line}")
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestRowError(
                f"expected {len(MANIFEST_COLUMNS)} fields at line {line}, got {len(row)}"
            )
        ref = row[0].strip()
        if not ref:
            raise ManifestRowError(f"empty image_path at line {line}")
        if ref in seen:
            raise ManifestDuplicateError(
                f"duplicate image_path {ref!r} at line {line} (first seen at line {seen[ref]})"
            )
        seen[ref] = line

        values = []
        for column, raw in zip(MANIFEST_COLUMNS[1:], row[1:]):
            try:
                value = float(raw)
            except ValueError:
                raise ManifestRowError(
                    f"non-numeric nutrient at line {line}: {column}={raw!r}"
                ) from None
            if not math.isfinite(value):
                raise ManifestRowError(f"non-finite nutrient at line {line}: {column}={raw!r}")
            if value < 0:
                raise ManifestRowError(f"negative nutrient at line {line}: {column}={raw!r}")
            values.append(value)
        samples.append(Sample(image_ref=ref, label=NutrientVector(*values)))

    return DatasetManifest(
        samples=tuple(samples),
        base_dir=Path(base_dir) if base_dir is not None else None,
    )


def render_manifest(manifest: DatasetManifest) -> str:
    """Render a manifest back to CSV; ``parse_manifest`` inverts this exactly."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for sample in manifest.samples:
        writer.writerow([sample.image_ref] + [repr(v) for v in sample.label.as_tuple()])
    return out.getvalue()


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        return parse_manifest(fh, base_dir=path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(render_manifest(manifest), encoding="utf-8")


def load_image(ref: str | Path, resolution: int) -> ImageTensor:
    """Decode an image as RGB, resize to (resolution, resolution), scale to [0, 1].

    The resize runs per-channel in Pillow float mode, so values are exact
    averages of source pixels (no intermediate 8-bit rounding). Channels are
    divided by 255; no mean/std normalization is applied.
    """
    if not isinstance(resolution, (int, np.integer)) or resolution <= 0:
        raise ValueError(f"resolution must be a positive integer, got {resolution!r}")
    path = Path(ref)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            channels = [
                np.asarray(
                    c.convert("F").resize((resolution, resolution), Image.Resampling.BILINEAR),
                    dtype=np.float64,
                )
                for c in rgb.split()
            ]
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {str(ref)!r}: {exc}") from exc
    pixels = np.clip(np.stack(channels) / 255.0, 0.0, 1.0)
    return ImageTensor(pixels=pixels, source_ref=str(ref))


def _seeded_rng(seed: int, epoch: int | None = None) -> np.random.Generator:
    entropy = seed & 0xFFFFFFFFFFFFFFFF
    key = () if epoch is None else (epoch,)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=key))


def split_dataset(
    manifest: DatasetManifest,
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> DatasetManifest:
    """Assign every sample to train/val/test with a seeded shuffle.

    Split sizes come from cumulative fraction boundaries: after shuffling,
    positions [0, b1) are train, [b1, b2) val, and [b2, n) test, where
    b1 = round(n * f_train) and b2 = round(n * (f_train + f_val)) using
    Python's round. The same seed always yields the same assignment.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError(f"expected 3 split fractions (train, val, test), got {len(fractions)}")
    if any(not math.isfinite(f) or f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got sum {sum(fractions)!r}")

    n = len(manifest)
    order = _seeded_rng(seed).permutation(n)
    b1 = min(n, max(0, round(n * fractions[0])))
    b2 = min(n, max(b1, round(n * (fractions[0] + fractions[1]))))

    assignment: dict[str, str] = {}
    for pos, idx in enumerate(order):
        split = "train" if pos < b1 else ("val" if pos < b2 else "test")
        assignment[manifest.samples[idx].image_ref] = split
    return replace(manifest, split_assignment=assignment)


def batch_index_plan(
    n: int, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 1
) -> list[np.ndarray]:
    """Partition indices 0..n-1 into consecutive batches, optionally shuffled.

    The shuffle order is a pure function of (seed, epoch), so epochs are
    reproducible and resumable without carrying RNG state.
    """
    if n < 1:
        raise ValueError("cannot plan batches over zero samples")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = _seeded_rng(seed, epoch).permutation(n) if shuffle else np.arange(n)
    return [order[start : start + batch_size] for start in range(0, n, batch_size)]


def _load_pixels(path: Path, resolution: int) -> np.ndarray:
    return load_image(path, resolution).pixels


def batches(
    manifest: DatasetManifest,
    split: str | None,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    *,
    epoch: int = 1,
    resolution: int = DEFAULT_RESOLUTION,
    workers: int = 0,
) -> Iterator[Batch]:
    """Yield one epoch of batches over a split.

    Every sample of the split appears exactly once; the last batch may be
    smaller. With ``workers > 0`` images are decoded concurrently, but batch
    composition and ordering are identical regardless of worker count.
    """
    samples = manifest.split_samples(split)
    if not samples:
        where = "manifest" if split is None else f"split {split!r}"
        raise EmptySplitError(f"empty split: {where} contains no samples")
    plan = batch_index_plan(len(samples), batch_size, shuffle, seed, epoch)
    targets = np.stack([s.label.as_array() for s in samples])

    def assemble(indices: np.ndarray, pool: ThreadPoolExecutor | None) -> Batch:
        paths = [manifest.resolve_ref(samples[i].image_ref) for i in indices]
        if pool is None:
            images = [_load_pixels(p, resolution) for p in paths]
        else:
            images = list(pool.map(_load_pixels, paths, [resolution] * len(paths)))
        return Batch(
            images=np.stack(images),
            targets=targets[indices],
            refs=tuple(samples[i].image_ref for i in indices),
        )

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for indices in plan:
                yield assemble(indices, pool)
    else:
        for indices in plan:
            yield assemble(indices, None)


def array_batches(
    images: np.ndarray,
    targets: np.ndarray,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    *,
    epoch: int = 1,
    refs: Sequence[str] | None = None,
) -> Iterator[Batch]:
    """Batch in-memory arrays with the same plan semantics as ``batches``."""
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if images.ndim != 4 or targets.ndim != 2 or images.shape[0] != targets.shape[0]:
        raise ValueError(
            f"expected images (N, 3, H, W) and targets (N, 5); got {images.shape} and {targets.shape}"
        )
    if images.shape[0] == 0:
        raise EmptySplitError("empty split: no samples provided")
    if refs is None:
        refs = [f"array:{i}" for i in range(images.shape[0])]
    for indices in batch_index_plan(images.shape[0], batch_size, shuffle, seed, epoch):
        yield Batch(
            images=images[indices],
            targets=targets[indices],
            refs=tuple(refs[i] for i in indices),
        )
