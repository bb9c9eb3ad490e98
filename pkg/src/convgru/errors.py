"""Exception types shared across the library.

The CLI maps ValidationError subclasses to exit code 1 and
NumericalError (plus unexpected failures) to exit code 2.
"""


class ConvGruError(Exception):
    """Base class for all library errors."""


class ValidationError(ConvGruError):
    """Bad configuration, arguments, or input files."""


class DimensionError(ValidationError):
    """A shape or extent that cannot be realized (e.g. VALID window larger than input)."""


class CheckpointError(ValidationError):
    """Malformed, truncated, or incompatible checkpoint file."""


class DatasetError(ValidationError):
    """Dataset directory or manifest does not match the expected layout."""


class NumericalError(ConvGruError):
    """Runtime numerical failure (NaN/Inf values, aborted optimization step)."""


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""


class NoStartFrameError(ConvGruError):
    """Start-frame detection found no frame satisfying all conditions."""
