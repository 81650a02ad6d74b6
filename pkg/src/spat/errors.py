"""Exception taxonomy shared across the package."""


class SpatError(Exception):
    """Base class for all package errors."""


class ShapeError(SpatError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(SpatError):
    """NaN/Inf encountered, or an optimization diverged."""


class ContractError(SpatError):
    """A caller violated an API precondition."""


class ConfigError(SpatError):
    """An experiment or model configuration is invalid."""


class ParseError(SpatError):
    """An input file could not be parsed."""
