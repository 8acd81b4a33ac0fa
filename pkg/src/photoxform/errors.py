"""Exception types raised across the pipeline."""


class PhotoxformError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PhotoxformError, ValueError):
    pass


class ContractError(PhotoxformError, ValueError):
    """Shape, mode or dimension mismatch between collaborating objects."""


class GeometryError(PhotoxformError, ValueError):
    pass


class DomainError(PhotoxformError, ValueError):
    pass


class SamplingError(PhotoxformError, RuntimeError):
    pass


class DivergenceError(PhotoxformError, RuntimeError):
    pass


class ExportError(PhotoxformError, ValueError):
    pass


class FormatError(PhotoxformError, ValueError):
    """Malformed or unsupported binary container."""
