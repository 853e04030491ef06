"""Exception types raised across the package."""


class ManifoldEKFError(Exception):
    """Base class for errors raised by this package."""


class ChartDomainError(ManifoldEKFError, ValueError):
    """A point or coordinate vector lies outside the normal-coordinate chart."""


class NotSPDError(ManifoldEKFError, ValueError):
    """A matrix that must be symmetric positive-definite is not."""


class StepSizeError(ManifoldEKFError, ValueError):
    """A numerical step size is not strictly positive."""


class SingularInnovationError(ManifoldEKFError, ArithmeticError):
    """The innovation covariance could not be factorized."""


class ConfigError(ManifoldEKFError, ValueError):
    """Invalid run configuration.

    ``field`` names the offending configuration key (dotted path) and
    ``line`` the source line when the error comes from JSON decoding.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
