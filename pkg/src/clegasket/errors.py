"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
UndecidableFractionError -> 4, everything else here -> 3.
"""


class ConfigError(ValueError):
    """Bad run configuration: unknown keys, unparsable values, missing files."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class FitError(RuntimeError):
    """Regression could not be performed (too few usable points, degenerate data)."""


class EstimationError(RuntimeError):
    """A Monte Carlo estimate is undefined, e.g. the conditioning event never occurred."""


class TraceError(RuntimeError):
    """Flow or trace integration failed to produce a usable value."""


class GeometryError(RuntimeError):
    """Degenerate geometry that survived all perturbation retries."""


class RenderError(RuntimeError):
    """Nothing to render, or the artifact does not fit the requested style."""


class EventUndecidableError(RuntimeError):
    """Loop containment could not be resolved at the available trace resolution."""


class RetryExhaustedError(RuntimeError):
    """A retried sampling procedure ran out of attempts."""


class QualityError(RuntimeError):
    """A run-quality gate failed."""


class UndecidableFractionError(QualityError):
    """Too many Monte Carlo trials could not be classified either way."""
