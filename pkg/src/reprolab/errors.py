"""Exception types shared across the package."""


class ReproLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ReproLabError):
    """Tensor shapes, ranks, or extents are incompatible with an operation."""


class LabelError(ReproLabError):
    """A class label is outside the valid range."""


class FormatError(ReproLabError):
    """A binary file does not match its expected on-disk format."""


class ConsistencyError(ReproLabError):
    """Two file headers or data structures that must agree do not."""


class ConfigurationError(ReproLabError):
    """An experiment or optimizer configuration is invalid."""


class InjectivityError(ConfigurationError):
    """A class map assigns the same source class to two target classes."""


class NumericError(ReproLabError):
    """A computation produced non-finite values."""


class DegenerateDataError(ReproLabError):
    """Statistical input has no variance to correlate."""


class SchemaError(ReproLabError):
    """A report file is missing a requested column."""
