"""Exception types raised across the package."""


class PcafLabError(Exception):
    """Base class for all errors raised by pcaf_lab."""


# -- validation -------------------------------------------------------------

class ValidationError(PcafLabError, ValueError):
    pass


class AsymmetricConductance(ValidationError):
    pass


class NonpositiveBaseMeasure(ValidationError):
    pass


class NegativeEntry(ValidationError):
    pass


class NonpositiveAlpha(ValidationError):
    pass


class NonpositiveTime(ValidationError):
    pass


class NonpositiveStep(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class UnsupportedDimension(ValidationError):
    pass


class UnsupportedRegion(ValidationError):
    pass


class NotOneDimensional(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class SupportOutsideBins(ValidationError):
    pass


class NonLipschitzCoefficient(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    def __init__(self, message, path=()):
        self.path = tuple(path)
        where = "/".join(str(p) for p in self.path) or "<root>"
        super().__init__(f"{where}: {message}")


# -- numerical --------------------------------------------------------------

class SolverFailure(PcafLabError, ArithmeticError):
    def __init__(self, message, condition=None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)


class NotFiniteEnergy(PcafLabError, ArithmeticError):
    pass


class NonintegrableSingularity(PcafLabError, ArithmeticError):
    pass
