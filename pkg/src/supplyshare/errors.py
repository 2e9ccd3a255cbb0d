"""Exception and warning types shared across the package."""


class SupplyShareError(Exception):
    """Base class for all package errors."""


class SchemaError(SupplyShareError):
    """Input file does not match the expected layout (columns, tokens)."""


class RangeError(SupplyShareError):
    """A value falls outside its permitted range."""


class UnknownCountryError(SupplyShareError):
    """A country name is absent from the geography index."""


class DegenerateCompositionError(SupplyShareError):
    """The private-sector total is zero, so the ratio share is undefined."""


class WindowError(SupplyShareError):
    """A year falls outside the estimation window."""


class ConfigError(SupplyShareError):
    """Invalid configuration (model, sampler, or scenario)."""


class SPDError(SupplyShareError):
    """A covariance matrix is not positive definite even after jitter."""


class NumericalError(SupplyShareError):
    """A density evaluation produced NaN."""


class InsufficientChainsError(SupplyShareError):
    """Convergence diagnostics need at least two chains."""


class InsufficientDataError(SupplyShareError):
    """Not enough observations to perform the requested split or fit."""


class EmptySupportError(SupplyShareError):
    """A method has no usable rate-of-change medians inside the data mask."""


class TestSetMismatchError(SupplyShareError):
    """Two validation reports were built from different test sets."""

    __test__ = False  # keep pytest from collecting this as a test class


class GridMismatchError(SupplyShareError):
    """Two posterior summaries are not on the same (population, year, method) grid."""


class NonConvergenceWarning(UserWarning):
    """At least one monitored parameter has split-Rhat above the threshold."""


class DegenerateCompositionWarning(UserWarning):
    """A ratio observation was dropped because the private total is zero."""


class IngestWarning(UserWarning):
    """Non-fatal issue found while cleaning survey data."""
