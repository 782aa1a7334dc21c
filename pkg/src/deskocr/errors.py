"""Exception types shared across the toolkit."""


class DeskOCRError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(DeskOCRError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(DeskOCRError):
    """Input values outside the mathematical domain of an op (e.g. log of <= 0)."""


class NumericsError(DeskOCRError):
    """NaN/Inf detected in a forward value or gradient."""


class TapeError(DeskOCRError):
    """Misuse of the autodiff tape (double backward, loss not recorded, ...)."""


class ConfigError(DeskOCRError):
    """Invalid model or run configuration."""


class DataError(DeskOCRError):
    """Invalid training data (label too long for CTC, bad manifest, ...)."""


class CheckpointError(DeskOCRError):
    """Corrupt or incompatible checkpoint file."""
