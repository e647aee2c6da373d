"""Executable a priori estimates.

Each check compares a measured quantity against an explicit bound and
returns a report entry carrying both sides. Audits are read-only: they
never mutate the state they inspect.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import energy, geometry
from .geometry import POLE_0, POLE_INF, fubini_study


class AuditError(RuntimeError):
    pass


@dataclasses.dataclass
class AuditEntry:
    name: str
    passed: bool
    measured: float
    bound: float
    tol: float = 0.0
    note: str = ""


@dataclasses.dataclass
class AuditReport:
    entries: list = dataclasses.field(default_factory=list)

    def add(self, entry):
        self.entries.append(entry)
        return entry

    @property
    def all_passed(self):
        return all(e.passed for e in self.entries)

    def failed(self):
        return [e for e in self.entries if not e.passed]


# ---- curvature constant of the background ------------------------------


def bisectional_bound(grid):
    """Curvature constant Lambda of the background, computed not assumed.

    The background is constant-curvature; its Gauss curvature in the chart
    is max(ricci(rho0)/rho0) = 1, and the holomorphic-sectional convention
    used by the trace bound doubles it. Returns 2.0 up to roundoff.
    """
    rho0 = fubini_study(grid)
    ric = geometry.ricci_density(rho0).rho
    return 2.0 * float(np.max(ric / rho0.rho))


# ---- pointwise checks ---------------------------------------------------


def chern_lu_check(grid, phi, osc_bound=None):
    """Nodewise trace bound tr_{omega_phi} omega0 <= n(2L+1) exp((2L+1) Osc phi)."""
    v = grid.as_field_values(getattr(phi, "values", phi))
    rho0 = fubini_study(grid).rho
    rho = rho0 + 0.5 * grid.flat_laplacian(v)
    if np.min(rho) <= 0.0:
        raise geometry.GeometryError("Chern-Lu check requires a Kahler-positive potential")
    lam = bisectional_bound(grid)
    osc = geometry.oscillation(v) if osc_bound is None else float(osc_bound)
    bound = (2.0 * lam + 1.0) * math.exp((2.0 * lam + 1.0) * osc)
    measured = float(np.max(rho0 / rho))
    return AuditEntry("chern_lu", measured <= bound, measured, bound, note=f"osc={osc:.6g}")


def aubin_compare_check(grid, phi):
    """(1/2) I <= J_omega0 <= I, allowing roundoff on the exact identities."""
    i_val = energy.aubin_i(grid, phi)
    j0 = energy.j_background(grid, phi)
    tol = 1e-10 * (1.0 + abs(i_val))
    ok = (0.5 * i_val - tol) <= j0 <= (i_val + tol)
    return AuditEntry("aubin_compare", ok, j0, i_val, tol=tol, note=f"I={i_val:.6g}")


def mass_check(grid, rho_values, rel_tol=1e-8):
    rho = grid.as_field_values(getattr(rho_values, "rho", rho_values))
    mass = grid.quad_mass(rho)
    err = abs(mass - geometry.SPHERE_MASS)
    return AuditEntry("mass", err <= rel_tol * geometry.SPHERE_MASS, mass, geometry.SPHERE_MASS, tol=rel_tol)


def ricci_lower_bound_check(grid, rho_values, t, nonneg_density=None, tol=1e-6):
    """Ric(omega) - t*omega - (nonnegative path terms) >= -tol nodewise.

    For solved path states the left side reduces to -t times the Newton
    residual plus quadrature-register bookkeeping, so this is a consistency
    audit of the assembled right-hand side, not a new estimate.
    """
    rho = grid.as_field_values(getattr(rho_values, "rho", rho_values))
    ric = geometry.ricci_density(geometry.MetricDensity(grid, rho)).rho
    rest = 0.0 if nonneg_density is None else grid.as_field_values(nonneg_density)
    measured = float(np.min(ric - t * rho - rest))
    return AuditEntry("ricci_lower_bound", measured >= -tol, measured, 0.0, tol=tol)


# ---- spectral check -----------------------------------------------------


def first_eigenvalue(grid, rho_values, shift=-0.05, max_iter=200, tol=1e-11):
    """Smallest nonzero eigenvalue of the metric Laplacian.

    Solves the pencil  -(1/2) W lap f = lam * W rho f  by shift-inverted
    block subspace iteration on the rho-mean-zero subspace, with a
    deterministic start block (odd, even and azimuthal profiles so conical
    first modes are not missed). Rayleigh-Ritz extraction keeps the smallest
    Ritz value convergent even when the first eigenvalue is a near-degenerate
    cluster, as it is for point configurations with rotational symmetry.
    The iteration is deterministic, which the CSV byte-identity contract
    needs.
    """
    rho = grid.as_field_values(getattr(rho_values, "rho", rho_values)).ravel()
    w = grid.flat_weight_vector()
    a = (-0.5) * (sp.diags(w) @ grid.flat_laplacian_matrix())
    a = 0.5 * (a + a.T)  # symmetric to roundoff by construction
    b = w * rho
    try:
        lu = spla.splu((a - shift * sp.diags(b)).tocsc())
    except RuntimeError as exc:
        raise AuditError(f"eigen factorization failed: {exc}") from exc

    smesh = grid.smesh()
    sech = 1.0 / np.cosh(smesh)
    cols = [np.tanh(smesh) + 0.05 * smesh**2, sech + 0.0 * smesh]
    if grid.Nphi > 1:
        cols.append(np.cos(grid.phimesh()) * sech)
        cols.append(np.sin(grid.phimesh()) * sech)
    else:
        cols.append(np.tanh(smesh) * sech)
    x = np.column_stack([c.ravel() for c in cols])
    b_total = float(np.sum(b))
    lam_old = np.inf
    for it in range(max_iter):
        # deflate constants, then B-orthonormalize (modified Gram-Schmidt)
        kept = []
        for j in range(x.shape[1]):
            v = x[:, j] - (np.sum(b * x[:, j]) / b_total)
            for u in kept:
                v = v - np.sum(b * u * v) * u
            nrm = math.sqrt(np.sum(b * v * v))
            if nrm > 1e-13:
                kept.append(v / nrm)
        if not kept:
            raise AuditError("eigen iteration collapsed onto constants")
        q = np.column_stack(kept)
        ritz = q.T @ (a @ q)
        lams = np.linalg.eigvalsh(0.5 * (ritz + ritz.T))
        lam = float(lams[0])
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)) and it >= 3:
            return lam
        lam_old = lam
        x = lu.solve(b[:, None] * q)
    raise AuditError(f"eigen iteration did not settle (last {lam_old:.6g})")


def _coarsen_density(grid, rho):
    ns_c = max(16, grid.Ns // 2)
    nphi_c = grid.Nphi if grid.Nphi == 1 else max(8, grid.Nphi // 2)
    coarse = geometry.build_grid(grid.L, ns_c, nphi_c, grid.symmetry_mode)
    vals = grid.as_field_values(rho)
    if grid.Nphi > 1 and nphi_c < grid.Nphi:
        vals = vals[:, :: grid.Nphi // nphi_c]
    out = np.empty((ns_c, vals.shape[1]))
    for j in range(vals.shape[1]):
        out[:, j] = np.interp(coarse.s, grid.s, vals[:, j])
    return coarse, out


def lichnerowicz_check(grid, rho_values, t, rel_slack=0.02, with_richardson=True, lam1=None):
    """lambda_1(metric Laplacian) >= t - slack on states with Ric >= t.

    The continuum bound is tight at conical terminals (first mode sits at
    the cone angle), so the slack combines a fixed relative term with a
    measured two-grid Richardson estimate of the discretization error.
    A precomputed fine-grid eigenvalue can be passed to avoid recomputation.
    """
    rho = grid.as_field_values(getattr(rho_values, "rho", rho_values))
    if lam1 is None or not math.isfinite(lam1):
        lam1 = first_eigenvalue(grid, rho)
    slack = rel_slack * max(t, 0.0)
    note = ""
    if with_richardson:
        coarse, rho_c = _coarsen_density(grid, rho)
        lam_c = first_eigenvalue(coarse, rho_c)
        slack += (4.0 / 3.0) * abs(lam1 - lam_c)
        note = f"coarse={lam_c:.8g}"
    return AuditEntry("lichnerowicz", lam1 >= t - slack, lam1, t - slack, tol=slack, note=note)


# ---- model comparison near the divisor ----------------------------------


def _model_cone_density(grid, point, beta_prime, eps):
    """Chart density of the flat reference cone metric at one divisor point."""
    s = grid.smesh()
    if point == POLE_0:
        r2 = np.exp(2.0 * s)
    elif point == POLE_INF:
        r2 = np.exp(-2.0 * s)
    else:
        ph = grid.phimesh()
        r2 = np.exp(2.0 * s) - 2.0 * np.exp(s + point[0]) * np.cos(ph - point[1]) + math.exp(2.0 * point[0])
        jac = np.exp(2.0 * s)  # |dz/dw|^2 for the local coordinate z - p
        return beta_prime**2 * (r2 + eps) ** (beta_prime - 1.0) * jac
    return beta_prime**2 * (r2 + eps) ** (beta_prime - 1.0) * r2


def quasi_isometry_check(grid, cfg, rho_values, beta_prime, eps, radius=None):
    """Two-sided density comparison with the reference cone model near each point.

    The returned measured value is the largest two-sided ratio over all
    divisor neighborhoods; stability of this constant across an eps ladder
    (not its absolute size, which is convention-dependent) is the assertion,
    applied by quasi_isometry_stability. beta_prime = None uses each point's
    own cone angle (mixed-angle configurations).
    """
    rho = grid.as_field_values(getattr(rho_values, "rho", rho_values))
    chord = [geometry._chordal_sq_to_point(grid, p) for p in cfg.points]
    sep = []
    for i, p in enumerate(cfg.points):
        others = [
            math.sqrt(_chordal_point_to_point(p, q)) for j, q in enumerate(cfg.points) if j != i
        ]
        sep.append(min(others) if others else 1.0)
    rad = radius if radius is not None else 0.45 * min(sep)
    if rad > 0.5 * min(sep):
        raise AuditError(f"neighborhood radius {rad:.3g} exceeds half the point separation")
    worst = 0.0
    for i, p in enumerate(cfg.points):
        mask = chord[i] <= rad**2
        if not np.any(mask):
            raise AuditError(f"no grid nodes within radius {rad:.3g} of point {p}")
        bp = cfg.betas[i] if beta_prime is None else beta_prime
        model = _model_cone_density(grid, p, bp, eps)
        ratio = rho[mask] / model[mask]
        c = max(float(np.max(ratio)), float(np.max(1.0 / ratio)))
        worst = max(worst, c)
    return AuditEntry("quasi_isometry", True, worst, 0.0, note=f"radius={rad:.4g} eps={eps:g}")


def _chordal_point_to_point(p, q):
    def to_z(pt):
        if pt == POLE_0:
            return 0.0 + 0.0j
        if pt == POLE_INF:
            return None
        return complex(math.exp(pt[0]) * math.cos(pt[1]), math.exp(pt[0]) * math.sin(pt[1]))

    zp, zq = to_z(p), to_z(q)
    if zp is None and zq is None:
        return 0.0
    if zp is None or zq is None:
        z = zq if zp is None else zp
        return 1.0 / (1.0 + abs(z) ** 2)
    return abs(zp - zq) ** 2 / ((1.0 + abs(zp) ** 2) * (1.0 + abs(zq) ** 2))


def quasi_isometry_stability(entries, rel_window=0.25):
    """Assert the comparison constant varies by at most rel_window over a ladder."""
    vals = [e.measured for e in entries]
    lo, hi = min(vals), max(vals)
    ok = hi <= lo * (1.0 + rel_window) + 1e-30
    return AuditEntry("quasi_isometry_stability", ok, hi, lo * (1.0 + rel_window), tol=rel_window)


# ---- integrability monitor ----------------------------------------------


def kolodziej_monitor(grid, g_values, t, phi, exponents=(1.0, 1.5, 2.0), holder_gamma=0.5):
    """L^p norms of the right-hand density and a Holder quotient of phi.

    Trend data only: the relevant constants are not explicit, so nothing is
    asserted. The Holder quotient scans node pairs at dyadic s separations
    along the first azimuthal column.
    """
    g = grid.as_field_values(g_values)
    rho0 = fubini_study(grid)
    norms = {}
    for p in exponents:
        norms[p] = geometry.integrate(np.exp(p * g), rho0) / geometry.SPHERE_MASS
        norms[p] = norms[p] ** (1.0 / p)
    v = grid.as_field_values(getattr(phi, "values", phi))[:, 0]
    quot = 0.0
    d = 1
    while d < grid.Ns:
        diff = np.abs(v[d:] - v[:-d])
        quot = max(quot, float(np.max(diff)) / (d * grid.hs) ** holder_gamma)
        d *= 2
    note = " ".join(f"L{p:g}={norms[p]:.6g}" for p in exponents)
    return AuditEntry("kolodziej_monitor", True, quot, 0.0, note=note + f" gamma={holder_gamma}")
