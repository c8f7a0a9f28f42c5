"""Exception types shared across the package."""


class KeyposeDiffusionError(Exception):
    """Base class for all package errors."""


class DimensionError(KeyposeDiffusionError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(KeyposeDiffusionError, ValueError):
    """A call violated a documented precondition."""


class ConfigError(KeyposeDiffusionError, ValueError):
    """A configuration value is invalid."""


class DomainError(KeyposeDiffusionError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegeneracyError(KeyposeDiffusionError, ValueError):
    """A geometric quantity is too close to degenerate to be well defined."""


class ValidationError(KeyposeDiffusionError, ValueError):
    """An input failed an invariant check."""


class FormatError(KeyposeDiffusionError, ValueError):
    """A file does not follow the expected binary layout."""


class VersionMismatchError(FormatError):
    """A file was written with an unsupported format version."""
