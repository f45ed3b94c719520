"""
Exception hierarchy for the PECI-Net toolkit.
Validation problems are ValueErrors, file problems are OSErrors.
"""


class PeciNetError(Exception):
    """Base class for every error raised by this package."""


# Validation errors

class ConfigInvalid(PeciNetError, ValueError):
    """A run, model or pipeline configuration is not usable."""


class BadParams(PeciNetError, ValueError):
    """Synthetic phantom parameters are out of range."""


class ImageTooSmall(PeciNetError, ValueError):
    """Image is too small for the requested operation."""


class EmptyHistogram(PeciNetError, ValueError):
    """A histogram with zero total count cannot be equalized."""


class ShapeMismatch(PeciNetError, ValueError):
    """Tensor or array shapes are incompatible."""


class HeadsDontDivide(PeciNetError, ValueError):
    """Embedding width is not divisible by the number of attention heads."""


class IndexOutOfRange(PeciNetError, IndexError):
    """A channel index lies outside the tensor."""


class NotScalar(PeciNetError, ValueError):
    """backward() was called on a non-scalar tensor."""


class EpochOutOfRange(PeciNetError, ValueError):
    """Learning-rate schedule queried outside [0, total_epochs]."""


class BlockOutOfRange(PeciNetError, ValueError):
    """GradCAM decoder block index is not in 1..4."""


class TooFewPatients(PeciNetError, ValueError):
    """Not enough distinct patients for a three-way split."""


class EmptyDataset(PeciNetError, ValueError):
    """An operation needs at least one sample."""


class Diverged(PeciNetError, RuntimeError):
    """Training produced a non-finite loss."""


# File and format errors

class DataError(PeciNetError, OSError):
    """Base class for on-disk data problems."""


class MissingFile(DataError):
    """A referenced file does not exist."""


class BadManifest(DataError):
    """Dataset manifest is malformed."""


class BadMaskShape(DataError):
    """A mask does not match its image or is not binary."""


class CorruptFile(DataError):
    """Checkpoint is truncated or fails its checksum."""


class VersionMismatch(DataError):
    """Checkpoint was written by an incompatible format version."""
