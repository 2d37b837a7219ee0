"""Exception types raised across the package."""


class PermutationLimitError(ValueError):
    """Too many labels for exhaustive permutation or subset enumeration."""


class AbsoluteContinuityError(ValueError):
    """The second density of a KLD vanishes where the first does not."""


class GridResolutionError(ValueError):
    """A quadrature grid failed its self-check."""


class DegeneratePosteriorError(RuntimeError):
    """Every particle weight is zero (log-weight of -inf)."""


class ConfigError(ValueError):
    """A run configuration is malformed."""
