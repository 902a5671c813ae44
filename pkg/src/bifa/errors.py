"""Exception hierarchy. CLI exit codes are attached to the top-level classes."""


class BifaError(Exception):
    exit_code = 1


class ConfigError(BifaError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    """Input files disagree on variables or layout."""


class ParseError(ConfigError):
    """A cell could not be read as a finite number."""


class DimensionError(ConfigError):
    """Shapes or factor counts are inconsistent."""


class DomainError(BifaError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 3


class NumericError(BifaError, ArithmeticError):
    """A sampler or optimizer hit a numerical failure it could not recover from."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TruncationError(NumericError):
    """Adaptive truncation removed every loading column."""


class GuardRefusal(BifaError):
    """A fit was refused up front because it would not finish in reasonable time/memory."""

    exit_code = 4


class TimeBudgetExceeded(BifaError):
    """Wall-clock budget ran out; a checkpoint was written for resumption."""

    exit_code = 4

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
