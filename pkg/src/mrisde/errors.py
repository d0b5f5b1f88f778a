"""Exception types shared across the package."""


class MriSdeError(Exception):
    """Base class for all package-specific errors."""


class SizeError(MriSdeError, ValueError):
    """Image or grid dimensions outside the supported range."""


class ShapeMismatchError(MriSdeError, ValueError):
    """Operands with incompatible shapes."""


class ConfigurationError(MriSdeError, ValueError):
    """Inconsistent or infeasible configuration (e.g. sampling budget)."""


class ParameterError(MriSdeError, ValueError):
    """Scalar parameter outside its admissible range."""


class DegeneratePixelError(MriSdeError, ValueError):
    """Coil stack vanishes at a pixel where normalization is required."""


class DivergenceError(MriSdeError, RuntimeError):
    """Sampling or training state became non-finite.

    Carries the step index and noise level at which the blow-up was
    detected so failed runs can be diagnosed.
    """

    def __init__(self, message, step=None, sigma=None):
        super().__init__(message)
        self.step = step
        self.sigma = sigma


class FormatError(MriSdeError, ValueError):
    """Malformed container file; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
