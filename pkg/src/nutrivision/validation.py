"""Array validation helpers shared by the model, estimator, and evaluation
entry points.

All helpers return float64 copies-or-views of validated input and raise
``ShapeError`` (shape or dtype problems) or ``ValueError`` (value problems)
with messages naming what was expected.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

NUM_CHANNELS = 3


def check_resolution(resolution: int) -> int:
    if not isinstance(resolution, (int, np.integer)) or isinstance(resolution, bool):
        raise ValueError(f"resolution must be an integer, got {type(resolution).__name__}")
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return int(resolution)


def check_image_batch(images, resolution: int | None = None) -> np.ndarray:
    """Validate a (N, 3, H, W) image batch with square frames in [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected images with shape (N, 3, H, W), got {images.shape}")
    n, channels, height, width = images.shape
    if channels != NUM_CHANNELS:
        raise ShapeError(f"expected {NUM_CHANNELS} channels, got {channels}")
    if height != width:
        raise ShapeError(f"expected square images, got {height}x{width}")
    if resolution is not None and height != resolution:
        raise ShapeError(f"expected resolution {resolution}, got {height}")
    if n == 0:
        raise ValueError("image batch is empty")
    if not np.isfinite(images).all():
        raise ValueError("image batch contains non-finite values")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(
            f"image values must lie in [0, 1], got range "
            f"[{images.min()!r}, {images.max()!r}]"
        )
    return images


def check_target_batch(targets, n_samples: int | None = None) -> np.ndarray:
    """Validate a (N, 5) nutrient target batch: finite and non-negative."""
    from .dataio import NUM_TASKS

    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != NUM_TASKS:
        raise ShapeError(f"expected targets with shape (N, {NUM_TASKS}), got {targets.shape}")
    if n_samples is not None and targets.shape[0] != n_samples:
        raise ShapeError(f"expected {n_samples} target rows, got {targets.shape[0]}")
    if targets.shape[0] == 0:
        raise ValueError("target batch is empty")
    if not np.isfinite(targets).all():
        raise ValueError("targets contain non-finite values")
    if targets.min() < 0:
        raise ValueError(f"targets must be non-negative, got minimum {targets.min()!r}")
    return targets
