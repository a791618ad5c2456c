"""Exception hierarchy for the kcsm package."""


class KCSMError(Exception):
    """Base class for all package errors."""


class EmptyVolume(KCSMError, ValueError):
    pass


class InvalidVertex(KCSMError, IndexError):
    pass


class BoundaryError(KCSMError, ValueError):
    """Boundary condition does not match the frozen vertices a rule reads."""


class RuleError(KCSMError, ValueError):
    pass


class ShapeError(KCSMError, ValueError):
    pass


class InvalidHorizon(KCSMError, ValueError):
    pass


class NotAZero(KCSMError, ValueError):
    pass


class InvalidDistinguishedRegion(KCSMError, ValueError):
    pass


class DimensionGuard(KCSMError, ValueError):
    pass


class NumericalFailure(KCSMError, RuntimeError):
    pass


class FitFailure(KCSMError, RuntimeError):
    pass


class SearchGuard(KCSMError, RuntimeError):
    pass
