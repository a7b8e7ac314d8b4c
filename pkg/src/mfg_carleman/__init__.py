"""Numerical lab for weighted-energy (Carleman) estimates, unique continuation
and Cauchy-data reconstruction for a coupled forward-backward mean field game
system on box domains."""

from .errors import (
    ConfigError,
    ConstraintError,
    ConvergenceError,
    GeometryError,
    GridError,
    MfgCarlemanError,
    OverflowGuardError,
    SolverError,
    TraceError,
)
from .geometry import (
    AffineD,
    BetaSelection,
    DomainSpec,
    WeightConfig,
    build_d,
    compute_mu,
    eval_phi,
    make_weight_config,
    select_beta,
    select_r,
)
from .grid import (
    CauchyData,
    Field,
    SpaceTimeGrid,
    divergence,
    dt,
    extract_cauchy,
    gradient,
    laplacian,
    weighted_integral,
)
from .mfg import (
    ManufacturedCase,
    MFGCoefficients,
    MFGProblem,
    apply_P,
    make_manufactured,
    manufactured_ids,
    solve_u,
    solve_v,
)

__version__ = "0.1.0"
