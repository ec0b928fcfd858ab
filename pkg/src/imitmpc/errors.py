"""Exception hierarchy shared by every module of the package."""


class ImitMpcError(Exception):
    """Base class for all errors raised by imitmpc."""


class InvalidInput(ImitMpcError, ValueError):
    pass


class NonConvergence(ImitMpcError):
    pass


class SingularMatrix(ImitMpcError):
    pass


class UnstableMatrix(ImitMpcError):
    pass


class DegenerateLevel(ImitMpcError):
    pass


class InfeasibleState(ImitMpcError):
    """The controller's optimization problem has no solution at the query state."""

    def __init__(self, message="optimization problem infeasible", state=None):
        super().__init__(message)
        self.state = state


class EmptyTightenedSet(ImitMpcError):
    pass


class ExpertInfeasible(ImitMpcError):
    """An expert query failed during data collection."""

    def __init__(self, message, state=None, stage=None):
        super().__init__(message)
        self.state = state
        self.stage = stage


class ZeroBaseline(ImitMpcError):
    pass


class UnknownDimension(ImitMpcError):
    pass


class NonFiniteLoss(ImitMpcError):
    pass


class ConfigError(ImitMpcError):
    pass
