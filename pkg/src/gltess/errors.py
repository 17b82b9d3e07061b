"""Exception hierarchy for gltess.

Every error the library raises deliberately derives from :class:`GltessError`
so callers (and the CLI) can map failures onto exit categories.
"""


class GltessError(Exception):
    """Base class for all gltess errors."""


class ConfigError(GltessError):
    """Invalid experiment configuration, preset, or input-file schema."""


class DegenerateInput(GltessError):
    """Geometrically degenerate input, e.g. coincident generator positions."""


class GeometryFailure(GltessError):
    """Polytope clipping produced a numerically inconsistent result.

    Signals a tolerance breach or exhausted capacity in the geometry kernel;
    not a user error.
    """


class UnknownId(GltessError):
    """A generator id was referenced that does not exist."""


class NonPositiveVolume(GltessError):
    """A volume argument that must be positive was not."""


class EmptyBreaks(GltessError):
    """Histogram bin edges missing or not strictly increasing."""


class BinMismatch(GltessError):
    """Two histograms do not share identical bin edges."""


class EmptyHistogram(GltessError):
    """A histogram with zero total mass was used where S > 0 is required."""


class InsufficientData(GltessError):
    """Too few values for the requested statistic."""


class InitializationFailure(GltessError):
    """Could not construct an admissible configuration within the budget."""


class RejectionBudgetExhausted(GltessError):
    """Conditional proposal sampling exceeded its rejection budget."""


class RadiusExceedsR0(GltessError):
    """A normalized generator radius exceeds the mark upper bound."""
