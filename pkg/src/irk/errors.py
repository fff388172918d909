"""Exception types shared across the package."""


class IRKError(Exception):
    """Base class for all package errors."""


class ShapeError(IRKError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(IRKError, ValueError):
    """A documented precondition was violated."""


class NumericError(IRKError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
