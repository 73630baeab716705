"""Exception hierarchy shared by the solver, simulation and I/O layers."""


class IntradayError(Exception):
    """Base class for all package errors."""

    exit_code = 4

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def record(self):
        """Machine-readable error record."""
        return {"error": type(self).__name__, "message": str(self),
                "context": {k: _plain(v) for k, v in self.context.items()}}


def _plain(v):
    try:
        return v.item()
    except AttributeError:
        return v if isinstance(v, (int, float, str, bool, type(None))) else repr(v)


class ParameterError(IntradayError, ValueError):
    """Invalid model, grid or option value."""

    exit_code = 2


class DomainError(IntradayError, ValueError):
    """Argument outside the domain of a coefficient or law."""


class MalformedCurveError(IntradayError, ValueError):
    """Forecast knots not strictly increasing or not finite."""

    exit_code = 3


class DivergentMGFError(IntradayError, ValueError):
    """Exponential moment requested outside the convergence strip."""


class AlignmentError(IntradayError, ValueError):
    """Stage boundaries cannot be placed on a uniform time grid."""

    exit_code = 2


class CFLError(IntradayError, ValueError):
    """Explicit jump step violates the monotonicity restriction."""


class SingularSystemError(IntradayError, ArithmeticError):
    """Zero pivot or singular factorization."""


class DivergenceError(IntradayError, ArithmeticError):
    """Non-finite values produced by a time march."""


class ConformanceError(IntradayError, ValueError):
    """Path and grid do not share the same time nodes."""


class DataError(IntradayError, ValueError):
    """Input data rejected at ingestion (schema, cadence, completeness)."""

    exit_code = 3


class SnapshotError(IntradayError, ValueError):
    """Snapshot container is corrupt or inconsistent."""

    exit_code = 3
