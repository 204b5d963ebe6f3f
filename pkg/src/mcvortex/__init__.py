"""Vortex dynamics of the 2D incompressible Euler equations in multiply
connected planar domains: velocity reconstruction from vorticity and boundary
circulations, point-vortex/blob evolution, weak-form auditing, and boundary
forces."""

from .errors import (
    AtomsPresent,
    BadLocalizer,
    CoincidentPoints,
    CollidingVortices,
    EvaluationAtAtom,
    HoleOutsideOuterBoundary,
    IllConditionedSystem,
    IncompatibleDomain,
    InconsistentModes,
    McVortexError,
    NonSimpleCurve,
    OriginNotInvertible,
    OverlappingObstacles,
    PointOutsideDomain,
    ResolutionTooLow,
    TooFewNodes,
    TrajectoryTooShort,
    UnresolvedSingularity,
    VortexExitedDomain,
)
from .geometry import (
    BOUNDED,
    EXTERIOR,
    BoundaryComponent,
    Circle,
    Cutoff,
    CutoffFamily,
    Domain,
    Ellipse,
    Mollifier,
    PointCurve,
    TubeQuadrature,
    boundary_quadrature,
    cutoff_chi,
    inversion,
    make_domain,
    mollifier_eta,
)
from .potential import (
    KernelBoundReport,
    PotentialSolver,
    SamplePlan,
    biot_savart_kernel,
    boundary_constants,
    build_potential_solver,
    green,
    green_disk,
    green_exterior_disk,
    harmonic_field,
    harmonic_field_stream,
    harmonic_measure,
    load_solver,
    routh_regular_gradient,
    routh_regular_part,
    save_solver,
    verify_kernel_bounds,
)

__version__ = "0.1.0"
