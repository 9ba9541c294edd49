"""Exception hierarchy shared by every aesq module."""


class AesqError(Exception):
    """Base class for all aesq errors."""


class DimensionError(AesqError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AesqError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(AesqError, ValueError):
    """A model or training configuration is invalid."""


class ValidationError(AesqError, ValueError):
    """A score distribution (or similar value) failed validation."""


class EvaluationError(AesqError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class UndefinedCorrelationError(AesqError, ArithmeticError):
    """A correlation was requested for an input with zero variance."""


class FormatError(AesqError, ValueError):
    """A binary file is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
