"""Block proximal alternating minimization with inertia and variance reduction."""

from .errors import (
    ConfigError,
    FormatError,
    IspalmError,
    NotPositiveDefinite,
    NumericalError,
    SingularProjection,
    StructuralError,
    UsageError,
)
from .estimators import (
    FiniteSumProblem,
    SarahState,
    bernoulli_refresh,
    draw_minibatch,
    full_gradient,
    sarah_step,
    sgd_estimate,
)
from .linalg import BlockVec, SpdFactor, cholesky_spd, extrapolate, solve_spd, sym_eigen
from .optim import (
    BoxProx,
    FunctionProx,
    ProxOp,
    SoftThreshold,
    SolverConfig,
    Trace,
    TraceRow,
    ZeroProx,
    estimate_local_lipschitz,
    generalized_gradient_norm,
    inertial_schedule,
    ipalm_step,
    ispalm_step,
    palm_step,
    run,
    spring_step,
)
from .quadratic import QuadraticProblem, random_quadratic
from .rng import Rng

__version__ = "0.1.0"
