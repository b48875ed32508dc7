"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A public operation produced a non-finite value (NaN or Inf)."""


class DatasetError(Exception):
    """Base class for dataset-file problems."""


class DatasetFormatError(DatasetError):
    """Bad magic bytes or an unsupported format version."""


class DatasetTruncatedError(DatasetError):
    """The file ended before the payload or footer promised by the header."""


class DatasetShapeError(DatasetError):
    """Header, payload, and footer disagree about sizes or sample indices."""


class ConfigError(ValueError):
    """Experiment configuration failed validation; the message names the field."""
