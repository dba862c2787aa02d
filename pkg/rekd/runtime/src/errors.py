"""Exceptions raised by rekd, each with a stable code and a CLI exit status."""


class RekdError(Exception):
    """Base class for rekd failures."""

    code = "error"
    exit_code = 1


class ShapeError(RekdError, ValueError):
    """Tensor extents violate an op's contract."""

    code = "shape"


class MissingFileError(RekdError, FileNotFoundError):
    """An input path does not exist."""

    code = "missing-file"
    exit_code = 3


class CheckpointError(RekdError):
    """A checkpoint cannot be used with the requested configuration."""

    code = "checkpoint"
    exit_code = 4


class BadMagicError(CheckpointError):
    code = "bad-magic"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class ShapeMismatchError(CheckpointError):
    code = "shape-mismatch"


class NumericalError(RekdError, ArithmeticError):
    """A NaN or Inf reached a parameter update or a loss."""

    code = "non-finite"
    exit_code = 5


class NoValidRegionError(RekdError, ValueError):
    """A validity mask selected no pixel."""

    code = "no-valid-region"


class ImageFormatError(RekdError, ValueError):
    """An input image is not a readable 8-bit binary PGM."""

    code = "bad-image"
    exit_code = 3


class OutputError(RekdError, OSError):
    """An output path cannot be created or written."""

    code = "unwritable-output"
    exit_code = 6
