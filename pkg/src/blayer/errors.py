"""Exception types raised by the solvers and the pipeline."""


class BlayerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BlayerError, ValueError):
    """Bad parameters, malformed config files or inconsistent grids."""


class PreconditionError(BlayerError):
    """An input violates a structural assumption (e.g. a non-positive velocity)."""


class ResolutionError(BlayerError):
    """The grid does not resolve a feature the solver depends on."""


class SolverError(BlayerError):
    """A linear or nonlinear solve failed.

    Parameters
    ----------
    message : str
        Human readable description.
    x : float, optional
        Marching coordinate at which the failure happened.
    residual : float, optional
        Last residual (or eigenvalue, or norm) observed.
    """

    def __init__(self, message, x=None, residual=None):
        super().__init__(message)
        self.x = x
        self.residual = residual


class ValidationError(BlayerError):
    """Problem data failed validation; carries the report."""

    def __init__(self, report):
        failed = [c.name for c in report.checks if not c.passed]
        super().__init__("validation failed: " + ", ".join(failed))
        self.report = report


class StageError(BlayerError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class DivergenceError(SolverError):
    """The nonlinear fixed-point iteration diverged; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
