"""Exception types raised across the package."""


class RotSlamError(Exception):
    """Base class for all errors raised by rotslam."""


class ZeroTranslation(RotSlamError, ValueError):
    pass


class DegenerateMatrix(RotSlamError, ValueError):
    pass


class NearPiSingularity(RotSlamError, ValueError):
    pass


class EmptyInput(RotSlamError, ValueError):
    pass


class InsufficientRegions(RotSlamError):
    pass


class DegenerateConfiguration(RotSlamError):
    pass


class CheiralityAmbiguity(RotSlamError):
    pass


class NoValidHypothesis(RotSlamError):
    pass


class DisconnectedGraph(RotSlamError):
    pass


class ParallelDirections(RotSlamError):
    pass


class NegativeDepth(RotSlamError):
    """A triangulated virtual point lies behind one of the two rays."""


class InsufficientConstraints(RotSlamError):
    pass


class NonConvergence(RotSlamError):
    """An iterative solver hit its cap before meeting its tolerance."""


class NoOverlap(RotSlamError):
    pass


class InvalidSpec(RotSlamError, ValueError):
    pass


class ConfigError(RotSlamError, ValueError):
    pass


class FormatError(RotSlamError):
    """Malformed input file; the message names ``path:line``."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
