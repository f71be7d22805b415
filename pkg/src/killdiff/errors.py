class KilldiffError(Exception):
    pass


class ConfigurationError(KilldiffError, ValueError):
    """Invalid grid, region, bin or experiment configuration."""


class DomainError(KilldiffError, ValueError):
    """Inputs outside the mathematical domain of an operation."""


class SolverError(KilldiffError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularSystemError(SolverError):
    pass
