"""Exception hierarchy shared across the toolkit.

Two families matter for the CLI exit codes: configuration problems
(exit code 2) and numerical failures discovered mid-computation
(exit code 3).
"""


class DlnError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DlnError):
    """Invalid configuration, recipe, or input schema. CLI exit code 2."""


class ParameterError(ConfigError):
    """A single parameter is out of its admissible range."""


class DimensionError(ConfigError):
    """Mismatched array lengths or shapes."""


class NumericalError(DlnError):
    """Numerical failure during computation. CLI exit code 3."""


class NumericalOverflowError(NumericalError):
    """A statistic evaluated to a non-finite value.

    Carries the first offending coordinate index when known.
    """

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ContourViolationError(NumericalError):
    """An iterate escaped the disc the contour was sized for."""


class QuadratureFailureError(NumericalError):
    """Contour quadrature produced an imaginary residue above audit level."""


class ModelViolationError(NumericalError):
    """An internal consistency check failed (signals a bug, not noise)."""


class ResolutionError(NumericalError):
    """Spectral grid too coarse for the requested computation."""


class SaddleContactError(NumericalError):
    """A squared coordinate became nonpositive along an entropy path."""


class WindowError(DlnError):
    """An admissible time window came out empty."""


class AlignmentError(DlnError):
    """Trajectory and curve grids or statistic registries do not match."""
