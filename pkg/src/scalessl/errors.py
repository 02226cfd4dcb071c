"""Exception hierarchy shared by every module."""


class ScaleSSLError(Exception):
    """Base class for all package errors."""


class ConfigError(ScaleSSLError, ValueError):
    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(field if not message else f"{field}: {message}")


class ShapeError(ScaleSSLError, ValueError):
    pass


class StrideError(ShapeError):
    pass


class TooSmall(ShapeError):
    pass


class InconsistentShape(ShapeError):
    pass


class InfeasibleConstraint(ScaleSSLError):
    pass


class DegenerateBatch(ScaleSSLError, ValueError):
    pass


class ZeroNorm(ScaleSSLError, ValueError):
    pass


class UnknownMethod(ScaleSSLError, ValueError):
    pass


class StructureMismatch(ScaleSSLError, ValueError):
    pass


class NonFiniteLoss(ScaleSSLError, FloatingPointError):
    pass


class NonFiniteGradient(ScaleSSLError, FloatingPointError):
    pass


class EmptySubset(ScaleSSLError, ValueError):
    pass


class MissingMask(ScaleSSLError, ValueError):
    pass


class SpecError(ScaleSSLError, ValueError):
    pass


class FormatError(ScaleSSLError, ValueError):
    pass


class NothingToReport(ScaleSSLError):
    pass
