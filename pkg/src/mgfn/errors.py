"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1 (argparse),
ConfigError/DataError exit 2, NumericsError exit 3.
"""


class MgfnError(Exception):
    """Base class for package errors."""


class ShapeError(MgfnError):
    """Tensor shapes or ranks incompatible with an operation."""


class ConfigError(MgfnError):
    """Invalid architecture or training configuration."""


class DataError(MgfnError):
    """Problem with dataset files or batch composition."""


class ManifestError(DataError):
    """Malformed or inconsistent dataset manifest."""


class CheckpointError(DataError):
    """Unreadable, truncated or mismatched checkpoint file."""


class UndefinedMetricError(DataError):
    """Metric requested on input where it is not defined (single-class labels)."""


class NumericsError(MgfnError):
    """Non-finite values where finite ones are required."""
