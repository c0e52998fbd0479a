"""Exception hierarchy shared by all modules."""


class HDGError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(HDGError, ValueError):
    pass


class TopologyError(HDGError):
    pass


class UnsupportedDegree(HDGError, ValueError):
    pass


class ConstructionError(HDGError):
    """A local space failed one of its defining numerical checks."""


class DecompositionError(ConstructionError):
    pass


class TheoremViolation(HDGError):
    """A kernel inclusion that the discrete inequalities guarantee did not hold."""


class IllConditionedMaterial(HDGError):
    pass


class AssemblyError(HDGError):
    pass


class SolverError(HDGError):
    pass


class NonConvergence(SolverError):
    """Fixed-point iteration hit ``maxit``; ``trace`` holds the iteration log."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ConfigError(HDGError, ValueError):
    pass
