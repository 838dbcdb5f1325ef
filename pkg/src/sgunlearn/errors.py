"""Exception hierarchy shared by every module."""


class SgUnlearnError(Exception):
    """Base class for all package errors."""


class ContractError(SgUnlearnError, ValueError):
    """An input violated an operation's preconditions (shapes, sizes, ranges)."""


class NumericError(SgUnlearnError, ArithmeticError):
    """A computation produced a non-finite value."""


class SolverError(SgUnlearnError, RuntimeError):
    """An iterative solver hit its iteration cap without converging."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ParseError(SgUnlearnError, ValueError):
    """A CSV, checkpoint or config file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SgUnlearnError, ValueError):
    """An experiment configuration is invalid."""
