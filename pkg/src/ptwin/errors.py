"""Exception types shared across the pipeline."""


class PtwinError(Exception):
    """Base class for all package errors."""


class ShapeError(PtwinError, ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(PtwinError, RuntimeError):
    """An API precondition that is not about shapes was violated."""


class ConfigError(PtwinError, ValueError):
    """Invalid run or model configuration."""


class EmptyBatchError(PtwinError, ValueError):
    pass


class CalibrationDomainError(PtwinError, ValueError):
    """Ratio-pyrometry calibration evaluated outside its valid domain."""


class RegionError(PtwinError, ValueError):
    """A requested image region or volume slab is empty or out of range."""


class FormatError(PtwinError, ValueError):
    """A binary or text file does not match its declared layout."""
