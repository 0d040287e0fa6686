"""Exception types raised across the package."""


class StreamGmmError(Exception):
    """Base class for all estimation and inference errors."""


class InitializationError(StreamGmmError):
    pass


class SingularSystem(StreamGmmError):
    pass


class NonFiniteUpdate(StreamGmmError):
    pass


class ExactIdentification(StreamGmmError):
    pass


class RankDeficientV(StreamGmmError):
    pass


class SingularSigma1(StreamGmmError):
    pass


class OfflineFitFailed(StreamGmmError):
    pass


class OptimizerFailed(StreamGmmError):
    pass


class NoConvergence(StreamGmmError):
    pass


class DegenerateScale(StreamGmmError):
    pass


class DegenerateSeries(StreamGmmError):
    pass


class Underflow(StreamGmmError):
    pass


class DomainError(StreamGmmError):
    pass


class TooShort(StreamGmmError):
    pass


class BadParams(StreamGmmError):
    pass


class RankDeficient(StreamGmmError):
    pass
