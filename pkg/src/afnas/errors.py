"""Exception hierarchy shared by every afnas module."""


class AfnasError(Exception):
    """Base class for all package errors."""


class ContractError(AfnasError, ValueError):
    """A precondition on an argument (shape, range, type) was violated."""


class InfeasibleShapeError(ContractError):
    """A layer received a feature map shorter than its kernel."""


class QuantDomainError(ContractError):
    """Non-finite value handed to the quantizer."""


class CodeRangeError(ContractError, OverflowError):
    """Integer code does not fit in the format's word width."""


class ParseError(AfnasError):
    """Malformed input file. Carries a line number or byte offset."""

    def __init__(self, message, *, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class ConfigError(AfnasError):
    """Missing or invalid configuration (metadata sidecar, config file)."""


class FormatError(ParseError):
    """Export blob or checkpoint is corrupt, truncated or of unknown version."""


class UndefinedMetricError(AfnasError, ZeroDivisionError):
    """A rate was requested whose denominator is zero."""


class TrainingFailure(AfnasError):
    """Training diverged (NaN/inf loss)."""


class GenerationError(AfnasError):
    """Random genome generation exhausted its retry budget."""


class DeadlockError(AfnasError, RuntimeError):
    """The streaming pipeline cannot make progress."""

    def __init__(self, message, trace=()):
        self.trace = list(trace)
        if self.trace:
            message = message + "\n" + "\n".join(self.trace)
        super().__init__(message)


class NumericError(AfnasError, ArithmeticError):
    """A computation has no finite result (e.g. a non-positive variance)."""
