"""Numerical laboratory for conical constant-curvature metrics on the sphere.

The package solves the semilinear Monge-Ampere equation of the continuity
method in the cylinder chart of the 2-sphere, deforms cone angles along
parameter paths, and applies the a priori estimates of the underlying
theory as executable audits. Everything is n = 1 (one complex dimension);
the closed-form football metrics serve as ground truth throughout.

Module map:
    geometry  grid, quadrature registers, divisor data, curvature operators
    ma_core   Newton solver for the density equation and the smoothed setup
    energy    the energy-functional family in closed form
    paths     continuity-path drivers (fixed-angle, moving-angle, ladders)
    audit     executable estimates (trace bound, spectral gap, comparisons)
    cli       batch front end with checkpointed, deterministic artifacts
"""

__version__ = "0.1.0"

from .geometry import (
    DivisorConfig,
    GeometryError,
    MetricDensity,
    POLE_0,
    POLE_INF,
    ScalarField,
    SphereGrid,
    build_grid,
    divisor_norm_squared,
    fubini_study,
    integrate,
    laplace_beltrami,
    oscillation,
    ricci_density,
    ricci_potential,
    smoothed_divisor_form,
)
from .ma_core import (
    KahlerConeViolation,
    MAProblem,
    MaxIterExceeded,
    NewtonOptions,
    Potential,
    SolverError,
    ma_residual,
    newton_solve,
    smooth_volume_family,
    solve_reference,
)
from .energy import (
    FunctionalReport,
    aubin_i,
    aubin_j,
    coercivity_constant,
    functional_report,
    j_background,
    j_twisted,
    log_mabuchi_energy,
    mabuchi_energy,
    modified_log_mabuchi_energy,
    smoothed_log_mabuchi_energy,
)
from .paths import (
    DeformResult,
    LadderResult,
    NonCauchy,
    PathSchedule,
    PathState,
    StepCollapse,
    Trace,
    anticanonical_law,
    deform_angles,
    epsilon_ladder,
    i_drift_monitor,
    leg_law,
    leg_monitor,
    run_angle_path,
    run_fixed_angle_path,
)
from .audit import (
    AuditEntry,
    AuditError,
    AuditReport,
    aubin_compare_check,
    bisectional_bound,
    chern_lu_check,
    first_eigenvalue,
    kolodziej_monitor,
    lichnerowicz_check,
    mass_check,
    quasi_isometry_check,
    quasi_isometry_stability,
    ricci_lower_bound_check,
)

__all__ = [name for name in dir() if not name.startswith("_")]
