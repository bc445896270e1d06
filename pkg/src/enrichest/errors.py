"""Semantic exception hierarchy.

Public functions raise these instead of bare ValueError so callers (and the
CLI exit-code mapping) can distinguish configuration problems from legitimate
statistical outcomes such as a futility stop.
"""


class EnrichestError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnrichestError):
    """A config or data file violates the schema (unknown key, bad type/domain)."""


class ShapeError(EnrichestError):
    """Vector lengths or index ranges inconsistent with the population."""


class EmptyTarget(EnrichestError):
    """An operation required a non-empty subpopulation index set."""


class MissingScenario(EnrichestError):
    """True effects were requested but the population carries none."""


class InfeasibleAllocation(EnrichestError):
    """The requested allocation leaves an enrolled cell with an empty arm."""


class EmptyCell(EnrichestError):
    """A mean or variance was requested over a cell with no patients."""


class InvalidInterval(EnrichestError):
    """Truncation bounds are not an interval (NaN, or lower >= upper)."""


class InsufficientData(EnrichestError):
    """Too few observations to estimate the outcome variance."""


class NoEstimateAfterStop(EnrichestError):
    """The trial stopped for futility; no conditional estimate is defined."""


class TargetError(EnrichestError):
    """A requested estimation target is not estimable under the realized selection."""


class NotIntervalRepresentable(TargetError):
    """The selection event is not an interval in the target's stage-1 mean,
    so the conditional-unbiasedness construction does not apply to it."""


class RuleConsistencyError(EnrichestError):
    """A selection rule failed the randomized interval-consistency check."""


class ConvergenceFailure(EnrichestError):
    """Adaptive quadrature did not reach the requested tolerance."""
