"""Exception types raised across the package.

Everything derives from :class:`IpdhetError` so callers can catch the
package's failures with a single except clause while still being able to
distinguish the individual conditions.
"""


class IpdhetError(Exception):
    """Base class for all errors raised by ipdhet."""


class NotPositiveDefinite(IpdhetError):
    """A matrix required to be symmetric positive definite is not."""


class NonFiniteObjective(IpdhetError):
    """An objective function evaluated to NaN (or infinity) inside the search bracket."""


class NoSignChange(IpdhetError):
    """Root bracketing failed: f(lo) and f(hi) have the same sign."""


class UnsupportedScenario(IpdhetError):
    """A scenario configuration falls outside the shapes the closed-form truths cover."""


class RankDeficient(IpdhetError):
    """A design matrix is rank deficient in a way that cannot be repaired."""


class TooFewRows(IpdhetError):
    """Not enough observations for the requested fit."""


class TooFewTrials(IpdhetError):
    """A meta-analysis step needs at least two trials."""


class UnknownComponent(IpdhetError):
    """A named variance component does not exist in the fit."""


class DegenerateWeights(IpdhetError):
    """Meta-analytic weights are non-positive, non-finite, or otherwise unusable."""


class ZeroVariance(IpdhetError):
    """A covariate (or residual) variance that must be positive is zero."""


class IndependenceViolated(IpdhetError):
    """Cell counts are inconsistent with treatment-subgroup independence."""


class MismatchedPairs(IpdhetError):
    """Replicate records cannot be paired one-to-one across models."""


class EmptyCell(IpdhetError):
    """A summary cell has too few records to compute the requested statistics."""


class ConfigError(IpdhetError):
    """A run configuration is invalid."""
