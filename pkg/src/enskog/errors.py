"""Exception hierarchy shared by all modules."""


class EnskogError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(EnskogError, ValueError):
    pass


class InvalidState(EnskogError, ValueError):
    """A phase point violates hard-sphere exclusion or a domain constraint."""


class NoInverseError(EnskogError, ValueError):
    """The restitution curve cannot be inverted for the requested speed."""


class ExcludedTrajectory(EnskogError):
    """Trajectory belongs to the measure-zero set the theory excludes."""


class GrazingCollision(ExcludedTrajectory):
    pass


class SimultaneousCollision(ExcludedTrajectory):
    pass


class CollisionCapExceeded(ExcludedTrajectory):
    pass


class EventOrderChanged(EnskogError):
    """Finite-difference perturbation altered the sequence of collision events."""


class QuadratureBudgetExceeded(EnskogError):
    pass


class SurvivalUnderflow(EnskogError):
    """The survival integral is below the floor, so its reciprocal is undefined."""


class UnsupportedOrder(EnskogError, ValueError):
    pass
