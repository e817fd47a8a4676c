"""Exception hierarchy shared by every subsystem."""


class AnpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AnpError, ValueError):
    """Operand shapes do not conform."""


class GraphStateError(AnpError, RuntimeError):
    """A compute graph was used after it was consumed by a backward pass."""


class ContractError(AnpError, ValueError):
    """A precondition on an argument was violated."""


class DomainError(AnpError, ValueError):
    """Argument outside the mathematical domain of a function."""


class FormatError(AnpError, ValueError):
    """A binary or text file does not follow its declared format."""


class ConsistencyError(AnpError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class ConfigError(AnpError, ValueError):
    """Invalid or incomplete experiment configuration."""


class NumericalError(AnpError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
