"""Optimal transport between equilibrium measures of controllable LTI systems."""

from .costs import (
    LQ,
    MIN_ENERGY,
    CostModel,
    QuadraticCostForm,
    ReducedCost,
    RunningCostSpec,
    convexity_certificate,
    cost_model,
    lq_cost,
    min_energy_cost,
    q_structure_residual,
    quadratic_form_extract,
    reduced_quadratic,
    translation_invariance_probe,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DimensionError,
    EmptySupportError,
    EqotError,
    NotEndpointQuadraticError,
    NotStrictlyConvexError,
    OffEquilibriumError,
    SteeringFailureError,
    TrivialEquilibriumError,
    UncontrollableSystemError,
)
from .flow import (
    FrameSet,
    SteeringSolution,
    displacement_interpolate,
    lq_steering,
    ode_residual,
    particle_positions,
    particle_speeds,
    reverse_trajectory,
    steer,
    steering_control,
)
from .linsys import (
    EquilibriumSpace,
    Gramian,
    LTISystem,
    embed,
    equilibrium_space,
    expm,
    gramian,
    project,
    reduce,
)
from .measures import DensityGrid, DiscreteMeasure, MeasureSpec, discretize, rasterize, read_pgm
from .transport import (
    SolverParams,
    TransportProblem,
    TransportResult,
    TransportSolution,
    barycentric_map,
    exact_assignment,
    monotone_1d,
    sinkhorn,
    solve_reduced,
    solve_transport,
)

__version__ = "0.1.0"
