"""Exception hierarchy shared by every module of the engine."""


class FinslerError(Exception):
    """Base class for all engine errors."""


class ConfigError(FinslerError):
    """Invalid metric specification or run configuration."""


class InadmissibleSample(FinslerError):
    pass


class NonPositiveValue(FinslerError):
    pass


class EmptyFiber(FinslerError):
    pass


class SingularEvaluation(FinslerError):
    """A jet or plain evaluation hit a pole (sqrt/reciprocal of a non-positive value)."""


class StepUnderflow(FinslerError):
    pass


class NotPositiveDefinite(FinslerError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class RiemannianDegenerate(FinslerError):
    """Mean Cartan torsion below the fit-eligibility threshold."""


class FitIllPosed(FinslerError):
    pass


class NotHomogeneous(FinslerError):
    pass


class RankDeficient(FinslerError):
    pass


class BoundsExceeded(FinslerError):
    pass


class Extinct(FinslerError):
    pass


class ProbeStepInvalid(FinslerError):
    pass
