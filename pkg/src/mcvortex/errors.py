"""Exception types raised by the public API."""


class McVortexError(Exception):
    """Base class for all library errors."""


# geometry
class NonSimpleCurve(McVortexError):
    pass


class OverlappingObstacles(McVortexError):
    pass


class HoleOutsideOuterBoundary(McVortexError):
    pass


class OriginNotInvertible(McVortexError):
    pass


class TooFewNodes(McVortexError):
    pass


# potential
class CoincidentPoints(McVortexError):
    pass


class PointOutsideDomain(McVortexError):
    pass


class IllConditionedSystem(McVortexError):
    pass


class ResolutionTooLow(McVortexError):
    pass


# vorticity
class UnresolvedSingularity(McVortexError):
    pass


class SupportTooClose(McVortexError):
    pass


# reconstruction
class EvaluationAtAtom(McVortexError):
    pass


class InconsistentModes(McVortexError):
    pass


# dynamics
class CollidingVortices(McVortexError):
    pass


class VortexExitedDomain(McVortexError):
    pass


# weakform
class IncompatibleDomain(McVortexError):
    pass


class BadLocalizer(McVortexError):
    pass


class AtomsPresent(McVortexError):
    pass


class TrajectoryTooShort(McVortexError):
    pass
