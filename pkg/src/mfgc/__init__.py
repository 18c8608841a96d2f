"""Numerical toolkit for N-player games of controls and their mean-field limit."""

from .errors import (
    ConfigError,
    FixedPointFailure,
    InnerMaxDiverged,
    MfgcError,
    MissingConstants,
    NoConvergence,
    NonLqModel,
    OutOfDomain,
    PicardStalled,
    SingularM,
    SizeMismatch,
    StabilityViolation,
    UnknownKind,
    WrongCloudSize,
)
from .fixedpoint import (
    BlockMatrix,
    FixedPointResult,
    assemble_blocks,
    decay_profile,
    hatH_eval,
    hatHik_eval,
    higher_derivatives,
    jacobian_p,
    jacobian_x,
    solve_aN,
    solve_phi,
)
from .meanfield import (
    MasterLift,
    MasterLQ,
    MfgcSolution,
    convergence_report,
    lift,
    lq_moment_flow,
    master_residual,
    me_residual,
    solve_master_lq,
    solve_mfgc_picard,
)
from .model import (
    LqModel,
    LqSpec,
    Model,
    StateActionCloud,
    StateCloud,
    TanhModel,
    lq_model,
    make_model,
    moment,
    nonlinear_model,
    wasserstein,
)
from .monotonicity import (
    MonotonicityReport,
    audit_discrete_M,
    audit_disp_G,
    audit_disp_L,
    audit_ll,
    audit_ll_propagation,
    compute_C_disp,
)
from .nash import (
    Grid,
    RiccatiSolution,
    TrajectoryBatch,
    ValueField,
    derivative_decay_report,
    load_field,
    nash_residual,
    offdiag_energy_norm,
    save_field,
    simulate_closed_loop,
    solve_nash_grid,
    solve_nash_riccati,
)
from .plots import emit_plots

__version__ = "0.1.0"
