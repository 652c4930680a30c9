"""Exception hierarchy shared by every module."""


class GWFError(Exception):
    """Base class for all package errors."""


class ShapeError(GWFError, ValueError):
    """Tensor extents do not fit the operation."""


class DomainError(GWFError, ValueError):
    """A scalar argument lies outside its admissible range."""


class InputError(GWFError, ValueError):
    """Input data is missing, empty or too short."""


class ConfigError(GWFError, ValueError):
    """Invalid preset, flag combination or hyperparameter."""


class StateError(GWFError, RuntimeError):
    """A recorded forward state is absent or no longer matches the parameters."""


class FormatError(GWFError, ValueError):
    """A file does not follow its binary or text layout."""


class CorruptionError(FormatError):
    """Checksum verification failed."""
