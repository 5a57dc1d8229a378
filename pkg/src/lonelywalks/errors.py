"""Exception types shared across the package."""


class LonelyWalksError(Exception):
    """Base class for package errors."""


class ConfigurationError(LonelyWalksError):
    """Invalid configuration: bad grids, out-of-range parameters, malformed config files."""


class NumericalUnderflowError(LonelyWalksError):
    """A transition probability underflowed; shrink the horizon or refine the table."""


class ExplosionError(LonelyWalksError):
    """Particle count exceeded the configured explosion cap."""


class RejectionBudgetError(LonelyWalksError):
    """Rejection sampler exhausted its try budget; use a larger torus or shorter horizon."""
