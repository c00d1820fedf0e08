"""Exception hierarchy shared by the library and the command line front end.

Every exception derives from LdrError. The CLI turns each family into a
process exit code with EXIT_CODES / ExitCodeFor.
"""


class LdrError(Exception):
    """Base class for all lomaxrace errors."""


class ParameterError(LdrError, ValueError):
    """An argument is invalid: non-positive rate, bad shape, unknown option."""


class DomainError(ParameterError):
    """An argument lies outside the domain of the function."""

    def __init__(self, name, value, domain):
        self.name = name
        self.value = value
        super(DomainError, self).__init__("{} must be {}, got {!r}".format(name, domain, value))


class InvalidRecordError(ParameterError):
    """An observation record violates its invariants."""


class UsageError(ParameterError):
    """Command line flags are inconsistent or out of range."""


class IngestionError(LdrError, ValueError):
    """A data file could not be parsed.

    Attributes:
        line: 1-based line number in the file (header is line 1), or None.
        column: column name, or None.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append("line {}".format(line))
        if column is not None:
            where.append("column {!r}".format(column))
        prefix = "{}: ".format(", ".join(where)) if where else ""
        super(IngestionError, self).__init__(prefix + message)


class NumericalError(LdrError, ArithmeticError):
    """A numerical routine failed (factorization, root finding, overflow)."""

    def __init__(self, message, sweep=None):
        self.sweep = sweep
        if sweep is not None:
            message = "sweep {}: {}".format(sweep, message)
        super(NumericalError, self).__init__(message)


class ConvergenceError(NumericalError):
    """A series or iteration did not reach its tolerance within its cap."""


class OptimizationError(NumericalError):
    """The MAP objective diverged."""

    def __init__(self, epoch, step_size, detail="objective is not finite"):
        self.epoch = epoch
        self.step_size = step_size
        super(OptimizationError, self).__init__(
            "epoch {} (step size {:g}): {}".format(epoch, step_size, detail))


class InvariantError(LdrError, RuntimeError):
    """Internal sampler state broke one of its invariants."""


class UndefinedMetricError(LdrError, ValueError):
    """A metric or estimate has no defined value for the given input."""


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INGESTION = 3
EXIT_NUMERICAL = 4

# Checked in order; the first matching class wins.
EXIT_CODES = (
    (IngestionError, EXIT_INGESTION),
    (NumericalError, EXIT_NUMERICAL),
    (ParameterError, EXIT_USAGE),
    (UndefinedMetricError, EXIT_USAGE),
)


def ExitCodeFor(exc):
    """Returns the process exit code for an exception instance."""
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_FAILURE
