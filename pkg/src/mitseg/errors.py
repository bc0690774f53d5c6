"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ConfigError /
ShapeError / DataError exit 2, NumericError exit 3.
"""


class MitsegError(Exception):
    """Base class for all package errors."""


class ConfigError(MitsegError):
    """Invalid or inconsistent model configuration."""


class ShapeError(MitsegError):
    """Tensor or grid shape incompatible with an operation."""


class DataError(MitsegError):
    """Malformed dataset, image file or label map."""


class CheckpointError(MitsegError):
    """Corrupt or incompatible checkpoint file."""


class CheckpointMismatch(CheckpointError):
    """Checkpoint config does not match the expected config."""


class NumericError(MitsegError):
    """A numerical check (gradient, loss finiteness, selftest) failed."""
