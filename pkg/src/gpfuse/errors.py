"""Exception types raised by gpfuse."""


class GpFuseError(Exception):
    """Base class for all gpfuse errors."""


class CholeskyFailure(GpFuseError):
    """A covariance matrix stayed indefinite after maximum jitter escalation."""


class NonFiniteDensity(GpFuseError):
    """The target log-density or its gradient is non-finite at the start point."""


class AllDivergent(GpFuseError):
    """Every post-warmup transition of a chain diverged."""


class InsufficientChains(GpFuseError):
    """Too few chains or draws for the requested diagnostic."""


class PrecisionUnderflow(GpFuseError):
    """Fused precision fell below the floor guarding division."""


class TooFewPoints(GpFuseError):
    """Not enough data points for the requested partition."""


class OptimizationFailure(GpFuseError):
    """All hyperparameter optimization restarts produced non-finite objectives."""


class CellTimeout(GpFuseError):
    """A single experiment cell exceeded its wall-clock budget."""
