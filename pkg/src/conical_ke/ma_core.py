"""Semilinear Monge-Ampere solves on the chart grid.

The one-dimensional complex Monge-Ampere equation reduces to the semilinear
form

    rho0 + (1/2) lap(phi) = exp(-t*phi + G) * rho0

for a fixed log-right-hand-side field G and Ricci parameter t >= 0. Newton's
method is damped by residual backtracking plus a hard Kahler-cone line
search. The linearization (1/2)lap + t*exp(-t*phi+G)*rho0 is indefinite
(positive on constants, negative on high modes), so every linear step uses a
direct sparse factorization; no Krylov method is applicable here.

At t = 0 the equation only determines phi up to a constant and is solvable
only at matched mass, so the free_constant gauge solves a bordered system
for (phi, c) with flat-mean-zero phi, keeping the solvability defect in c.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry
from .geometry import (
    MetricDensity,
    ScalarField,
    divisor_norm_squared,
    fubini_study,
)

log = logging.getLogger("conical_ke.ma_core")


class SolverError(RuntimeError):
    pass


class MaxIterExceeded(SolverError):
    def __init__(self, residual):
        super().__init__(f"Newton did not converge; last sup-residual {residual:.3e}")
        self.residual = residual


class KahlerConeViolation(SolverError):
    def __init__(self, msg="line search cannot restore Kahler positivity"):
        super().__init__(msg)


class SingularLinearization(SolverError):
    def __init__(self, msg="linearized operator is numerically singular"):
        super().__init__(msg)


@dataclasses.dataclass
class MAProblem:
    """Right-hand side data: density = exp(-t*phi + G) * rho0."""

    grid: geometry.SphereGrid
    t: float
    G: np.ndarray
    gauge: str = "none"  # "free_constant" or "none"

    def __post_init__(self):
        if self.t < 0.0:
            raise ValueError("Ricci parameter t must be nonnegative")
        if self.gauge not in ("free_constant", "none"):
            raise ValueError(f"unknown gauge {self.gauge!r}")
        if self.t == 0.0 and self.gauge != "free_constant":
            raise ValueError("t = 0 requires the free_constant gauge")
        self.G = self.grid.as_field_values(self.G)
        if not np.isfinite(self.grid.quad_mass(np.exp(self.G) * fubini_study(self.grid).rho)):
            raise ValueError("exp(G)*rho0 is not integrable on the grid")


@dataclasses.dataclass
class NewtonOptions:
    tol_residual: float = 1e-10
    max_iter: int = 50
    damping: float = 0.5  # backtracking factor
    positivity_floor: float = 0.01  # times min(rho0), hard line-search constraint

    def __post_init__(self):
        if self.tol_residual <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclasses.dataclass
class Potential:
    """Kahler potential with a recorded normalization convention."""

    field: ScalarField
    normalization: str = "raw"  # "sup_zero" | "mean_zero" | "raw"

    def __post_init__(self):
        if self.normalization not in ("sup_zero", "mean_zero", "raw"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        grid = self.field.grid
        rho = fubini_study(grid).rho + 0.5 * grid.flat_laplacian(self.field.values)
        if np.min(rho) <= 0.0:
            raise geometry.GeometryError(
                f"potential violates Kahler positivity (min density {np.min(rho):.3e})"
            )

    @property
    def grid(self):
        return self.field.grid

    @property
    def values(self):
        return self.field.values

    def metric_density(self):
        grid = self.grid
        rho = fubini_study(grid).rho + 0.5 * grid.flat_laplacian(self.values)
        return MetricDensity(grid, rho)

    def normalized(self, tag):
        grid = self.grid
        v = self.values
        if tag == "sup_zero":
            v = v - np.max(v)
        elif tag == "mean_zero":
            v = v - grid.quad_flat(v) / grid.quad_flat(np.ones(grid.shape))
        elif tag != "raw":
            raise ValueError(f"unknown normalization {tag!r}")
        return Potential(ScalarField(grid, v), tag)


def ma_residual(problem, phi_values):
    """Nodewise residual rho0 + (1/2)lap(phi) - exp(-t*phi+G)*rho0."""
    grid = problem.grid
    v = grid.as_field_values(phi_values)
    rho0 = fubini_study(grid).rho
    return rho0 + 0.5 * grid.flat_laplacian(v) - np.exp(-problem.t * v + problem.G) * rho0


def _rhs_density(problem, phi_values, c=0.0):
    rho0 = fubini_study(problem.grid).rho
    return np.exp(-problem.t * phi_values + problem.G + c) * rho0


def newton_solve(problem, init=None, opts=None):
    """Damped Newton iteration for the semilinear equation.

    Returns a raw-normalized Potential whose sup-residual is below
    opts.tol_residual. For the free_constant gauge the returned potential is
    flat-mean-zero and the solved constant is attached as .solved_constant.
    Iteration count is attached as .newton_iters.
    """
    opts = opts or NewtonOptions()
    grid = problem.grid
    rho0 = fubini_study(grid).rho
    floor = opts.positivity_floor * np.min(rho0)
    if init is None:
        phi = grid.zeros()
    elif isinstance(init, Potential):
        phi = init.values.copy()
    else:
        phi = grid.as_field_values(init).copy()
    phi = grid.symmetrize(phi)
    free_c = problem.gauge == "free_constant"
    c = 0.0
    if free_c:
        # start from the mass-matching constant for the current iterate
        phi = phi - grid.quad_flat(phi) / grid.quad_flat(np.ones(grid.shape))
        mass = grid.quad_mass(_rhs_density(problem, phi))
        c = float(np.log(geometry.SPHERE_MASS / mass))

    lap = grid.flat_laplacian_matrix()
    n = grid.n_nodes
    w = grid.flat_weight_vector()

    def residual(p, cc):
        return rho0 + 0.5 * grid.flat_laplacian(p) - _rhs_density(problem, p, cc)

    res = residual(phi, c)
    res_norm = float(np.max(np.abs(res)))
    for it in range(opts.max_iter):
        if res_norm <= opts.tol_residual:
            pot = Potential(ScalarField(grid, phi), "raw")
            pot.newton_iters = it
            pot.solved_constant = c
            return pot
        rho_tilde = _rhs_density(problem, phi, c)
        try:
            if free_c:
                jac = sp.bmat(
                    [
                        [0.5 * lap + sp.diags(problem.t * rho_tilde.ravel()), -rho_tilde.reshape(-1, 1)],
                        [w[None, :], None],
                    ],
                    format="csc",
                )
                rhs = np.concatenate([-res.ravel(), [0.0]])
                sol = spla.splu(jac).solve(rhs)
                delta, dc = sol[:n].reshape(grid.shape), float(sol[n])
            else:
                jac = (0.5 * lap + sp.diags(problem.t * rho_tilde.ravel())).tocsc()
                sol = spla.splu(jac).solve(-res.ravel())
                delta, dc = sol.reshape(grid.shape), 0.0
        except RuntimeError as exc:  # SuperLU raises on singular factors
            raise SingularLinearization(str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise SingularLinearization("non-finite Newton direction")
        delta = grid.symmetrize(delta)

        step = 1.0
        accepted = False
        while step >= 2.0 ** -30:
            cand = phi + step * delta
            cand_c = c + step * dc
            cand_rho = rho0 + 0.5 * grid.flat_laplacian(cand)
            if np.min(cand_rho) > floor:
                cand_res = residual(cand, cand_c)
                cand_norm = float(np.max(np.abs(cand_res)))
                if cand_norm < res_norm * (1.0 - 0.2 * step) or cand_norm < opts.tol_residual:
                    phi, c, res, res_norm = cand, cand_c, cand_res, cand_norm
                    accepted = True
                    break
            step *= opts.damping
        if not accepted:
            if np.min(rho0 + 0.5 * grid.flat_laplacian(phi + 2.0 ** -30 * delta)) <= floor:
                raise KahlerConeViolation()
            raise MaxIterExceeded(res_norm)
        log.debug("newton it=%d res=%.3e step=%.3g", it + 1, res_norm, step)
    if res_norm <= opts.tol_residual:
        pot = Potential(ScalarField(grid, phi), "raw")
        pot.newton_iters = opts.max_iter
        pot.solved_constant = c
        return pot
    raise MaxIterExceeded(res_norm)


# ---- smoothing family and reference solve ------------------------------


def smooth_volume_family(grid, cfg, eps, ricci_pot=None, seed_potential=None, newton_init=None):
    """Mollified conical volume form and its t = 0 potential.

    eta_eps is the mass-normalized density
        exp(-mu*phi_seed + h) * rho0 / prod_i (|S_i|^2 + eps)^(1 - beta_i),
    the eps-mollification of the conical volume profile built on
    seed_potential (default: zero seed, the background's own profile, so
    that the family is a function of (grid, cfg, eps) alone and can be
    rebuilt from a checkpoint). Normalization makes eta_eps invariant under
    constant shifts of the seed. phi_eps solves omega_phi = eta_eps at
    t = 0 and is normalized to sup = 0; newton_init only warm-starts that
    solve and cannot move the returned family.
    """
    if eps <= 0.0 or eps > 1.0:
        raise ValueError("eps must lie in (0, 1]")
    mu = 1.0 if cfg is None else cfg.mu
    if cfg is not None:
        cfg.validate_against_grid(grid)
    rho0 = fubini_study(grid).rho
    h = grid.zeros() if ricci_pot is None else grid.as_field_values(ricci_pot)
    seed = grid.zeros() if seed_potential is None else grid.as_field_values(seed_potential)
    log_profile = -mu * seed + h
    for i in range(0 if cfg is None else cfg.k):
        s2 = divisor_norm_squared(grid, cfg, i).values
        log_profile = log_profile - (1.0 - cfg.betas[i]) * np.log(s2 + eps)
    raw = np.exp(log_profile) * rho0
    eta = MetricDensity(grid, raw * (geometry.SPHERE_MASS / grid.quad_mass(raw)))
    problem = MAProblem(grid, 0.0, np.log(eta.rho / rho0), gauge="free_constant")
    phi = newton_solve(problem, init=newton_init)
    out = phi.normalized("sup_zero")
    out.newton_iters = phi.newton_iters
    return eta, out


def solve_reference(grid, cfg, eps, phi_eps, ricci_pot=None, opts=None):
    """Reference potential for the fixed-angle path (its t = 0 state).

    Solves the t = 0 equation with
        G = -mu*phi_eps + h - sum_i (1-beta_i) log(|S_i|^2 + eps) + c_norm,
    where the explicit constant c_norm matches total mass 4*pi (the path
    equations as written leave it implicit; Yau-type solvability requires
    it). Returns (psi sup_zero-normalized, c_norm).
    """
    mu = 1.0 if cfg is None else cfg.mu
    if cfg is not None:
        cfg.validate_against_grid(grid)
    h = grid.zeros() if ricci_pot is None else grid.as_field_values(ricci_pot)
    g0 = -mu * grid.as_field_values(phi_eps.values if isinstance(phi_eps, Potential) else phi_eps) + h
    for i in range(0 if cfg is None else cfg.k):
        s2 = divisor_norm_squared(grid, cfg, i).values
        g0 = g0 - (1.0 - cfg.betas[i]) * np.log(s2 + eps)
    problem = MAProblem(grid, 0.0, g0, gauge="free_constant")
    psi = newton_solve(problem, init=phi_eps if isinstance(phi_eps, Potential) else None, opts=opts)
    c_norm = psi.solved_constant
    out = psi.normalized("sup_zero")
    out.newton_iters = psi.newton_iters
    return out, float(c_norm)
