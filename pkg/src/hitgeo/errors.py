"""Exception hierarchy shared by all hitgeo modules."""


class HitgeoError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(HitgeoError, ValueError):
    pass


class InvalidEdge(HitgeoError, ValueError):
    pass


class NotStronglyConnected(HitgeoError):
    pass


class GenerationFailed(HitgeoError):
    pass


class TrajectoryTooShort(HitgeoError, ValueError):
    pass


class GoalUnreachable(HitgeoError):
    pass


class NonFiniteInput(HitgeoError, ValueError):
    pass


class NoTape(HitgeoError, RuntimeError):
    """backward() was called without a recorded forward pass."""


class FrozenViolation(HitgeoError, RuntimeError):
    """A frozen network was asked to produce gradients."""


class NotFrozen(HitgeoError, RuntimeError):
    """A network that must be frozen still accepts gradients."""


class PhaseOrderViolation(HitgeoError, RuntimeError):
    pass


class TooFewCandidates(HitgeoError, ValueError):
    pass


class FormatError(HitgeoError, ValueError):
    """A serialized file has a bad magic string, version or payload."""


class ConfigError(HitgeoError, ValueError):
    pass


class RankDeficientWarning(UserWarning):
    """Displacement span or feature map is degenerate; results are reported anyway."""
