"""Exception hierarchy shared by all modules."""


class CCError(Exception):
    """Base class for every error raised by the package."""


class PointOutsideDomain(CCError):
    pass


class UnknownStructure(CCError):
    pass


class StructureDefinitionError(CCError):
    """Malformed structure file; message carries line/column when known."""


class RegularityError(CCError):
    """Operation needs a C11 structure but got C0 (or vice versa)."""


class RankDeficient(CCError):
    pass


class JacobianUnavailable(CCError):
    pass


class NonFiniteState(CCError):
    pass


class SeedDegenerate(CCError):
    pass


class ConstructionFailed(CCError):
    pass


class OutsideCalibratedSet(CCError):
    pass


class NotHorizontal(CCError):
    pass


class ZeroFrame(CCError):
    pass


class ShrinkExhausted(CCError):
    pass


class NotAdmissible(CCError):
    pass


class CapExceeded(CCError):
    pass


class DegenerateBox(CCError):
    pass


class PreconditionError(CCError, ValueError):
    """Caller-supplied parameters violate an operation's precondition."""
