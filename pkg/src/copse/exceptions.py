"""Exception hierarchy shared across the package."""


class CopseError(Exception):
    """Base class for all package errors."""


class DegenerateCloud(CopseError, ValueError):
    pass


class InvalidCount(CopseError, ValueError):
    pass


class RankDeficient(CopseError, ValueError):
    pass


class WrongSymmetryKind(CopseError, ValueError):
    pass


class NoSymmetry(WrongSymmetryKind):
    pass


class ShapeMismatch(CopseError, ValueError):
    pass


class EmptyInput(CopseError, ValueError):
    pass


class EmptyCloud(EmptyInput):
    pass


class NotScalar(CopseError, ValueError):
    pass


class EmptyDataset(CopseError, ValueError):
    pass


class EmptyPredictions(CopseError, ValueError):
    pass


class DegenerateView(CopseError, RuntimeError):
    """Too few points survive the partial-view simulation."""


class TrainingDiverged(CopseError, FloatingPointError):
    pass
