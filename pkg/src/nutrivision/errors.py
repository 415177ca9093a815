"""Exception hierarchy.

The CLI maps these onto its exit-code scheme: configuration problems are
exit 1, data problems exit 2, training divergence exit 3.
"""


class NutrivisionError(Exception):
    """Base class for all library errors."""


class ConfigurationError(NutrivisionError, ValueError):
    """Invalid configuration: bad hyperparameters, topology, or flags."""


class DataError(NutrivisionError):
    """Problems with input data: manifests, images, splits, stored files."""


class ManifestError(DataError):
    """Base for manifest parsing problems."""


class ManifestFormatError(ManifestError):
    """Header or column structure is wrong."""


class ManifestRowError(ManifestError):
    """A data row is malformed; the message carries the line number."""


class ManifestDuplicateError(ManifestError):
    """The same image path appears more than once."""


class ImageDecodeError(DataError):
    """An image file could not be read or decoded as RGB."""


class EmptySplitError(DataError):
    """A requested split contains no samples."""


class ShapeError(DataError):
    """An input array has the wrong shape; message states expected vs actual."""


class WeightLoadError(DataError):
    """A weights file does not match the target architecture."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt, truncated, or version-incompatible."""


class DivergenceError(NutrivisionError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
