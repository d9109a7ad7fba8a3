"""Exception types raised across the package."""


class UdfDiffError(Exception):
    """Base class for all package errors."""


class ParameterError(UdfDiffError, ValueError):
    pass


class ShapeError(UdfDiffError, ValueError):
    pass


class DegenerateError(UdfDiffError, ValueError):
    """Input geometry cannot support the requested operation."""


class ContractError(UdfDiffError, RuntimeError):
    """A caller broke an operation's precondition."""


class NumericError(UdfDiffError, ArithmeticError):
    pass


class FormatError(UdfDiffError, ValueError):
    pass


class ConfigError(UdfDiffError, ValueError):
    pass


class IncompatibleCheckpointError(UdfDiffError, ValueError):
    pass


class EmptyExtractionError(UdfDiffError, ValueError):
    pass
