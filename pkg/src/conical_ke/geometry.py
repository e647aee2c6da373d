"""Discretization of the sphere in a cylinder chart.

The chart is w = s + i*phi with z = e^w, s in [-L, L], phi in [0, 2*pi).
Densities are taken against the chart area element ds dphi, so the round
background metric has density rho0(s) = sech(s)^2 with total mass 4*pi.
All differential operators act through the flat Laplacian d2/ds2 + d2/dphi2
scaled by 1/(2*rho); the factor 1/2 is the Kahler normalization, under which
the first nonzero eigenvalue of the round Laplacian is 1.

Two quadrature registers coexist on purpose:

* the mass register (trapezoid plus exponential tail caps at s = +-L) is
  faithful for total masses of sech^2-class densities to ~1e-10;
* the flat register (pure trapezoid) pairs with the flux-form Laplacian so
  that sum(w * lap(f)) == 0 holds exactly, which the energy module needs for
  exact constant-invariance and path-independence identities.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

TWO_PI = 2.0 * math.pi
SPHERE_MASS = 4.0 * math.pi

POLE_0 = "POLE_0"
POLE_INF = "POLE_INF"

SYMMETRY_MODES = ("full_2d", "s1_invariant", "s1_z2_invariant")
DIVISOR_MODES = ("anticanonical_smooth", "snc")


class GeometryError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SphereGrid:
    """Nodes, weights and cached operators for the truncated cylinder chart."""

    L: float
    Ns: int
    Nphi: int
    symmetry_mode: str
    s: np.ndarray = dataclasses.field(repr=False, compare=False)
    phi: np.ndarray = dataclasses.field(repr=False, compare=False)
    hs: float = 0.0
    hphi: float = 0.0
    ws_flat: np.ndarray = dataclasses.field(repr=False, default=None, compare=False)
    ws_mass: np.ndarray = dataclasses.field(repr=False, default=None, compare=False)
    _cache: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    # ---- node helpers -------------------------------------------------

    @property
    def shape(self):
        return (self.Ns, self.Nphi)

    @property
    def n_nodes(self):
        return self.Ns * self.Nphi

    def smesh(self):
        return np.broadcast_to(self.s[:, None], self.shape)

    def phimesh(self):
        return np.broadcast_to(self.phi[None, :], self.shape)

    def zeros(self):
        return np.zeros(self.shape)

    def as_field_values(self, values):
        """Broadcast scalars / 1D s-profiles to the grid shape."""
        values = getattr(values, "values", values)  # ScalarField / Potential
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 0:
            return np.full(self.shape, float(arr))
        if arr.ndim == 1 and arr.shape[0] == self.Ns:
            return np.repeat(arr[:, None], self.Nphi, axis=1)
        if arr.shape != self.shape:
            raise GeometryError(f"field shape {arr.shape} does not match grid {self.shape}")
        return arr

    def symmetrize(self, values):
        """Project onto the grid's symmetry class (no-op in full_2d mode)."""
        v = values
        if self.symmetry_mode != "full_2d" and self.Nphi > 1:
            v = np.repeat(v.mean(axis=1, keepdims=True), self.Nphi, axis=1)
        if self.symmetry_mode == "s1_z2_invariant":
            v = 0.5 * (v + v[::-1, :])
        return v

    # ---- quadrature ---------------------------------------------------

    def quad_mass(self, values):
        """Integral over the sphere including the pole tail caps."""
        v = self.as_field_values(values)
        return float(self.hphi * np.sum(self.ws_mass[:, None] * v))

    def quad_flat(self, values):
        """Pure trapezoid integral; pairs exactly with flat_laplacian."""
        v = self.as_field_values(values)
        return float(self.hphi * np.sum(self.ws_flat[:, None] * v))

    # ---- flat Laplacian -----------------------------------------------

    def flat_laplacian(self, values, slope_lo=0.0, slope_hi=0.0):
        """Flux-form discrete d2/ds2 + d2/dphi2 with prescribed end slopes.

        End cells have width hs/2, which makes the operator exactly
        self-adjoint against the flat register and makes
        sum(ws_flat * lap(f)) equal to the prescribed boundary flux
        difference (zero for the default Neumann closure).
        """
        v = self.as_field_values(values)
        flux = np.empty((self.Ns + 1, self.Nphi))
        flux[1:-1, :] = (v[1:, :] - v[:-1, :]) / self.hs
        flux[0, :] = slope_lo
        flux[-1, :] = slope_hi
        cell = np.full(self.Ns, self.hs)
        cell[0] = cell[-1] = 0.5 * self.hs
        out = (flux[1:, :] - flux[:-1, :]) / cell[:, None]
        if self.Nphi > 1:
            out = out + (np.roll(v, -1, axis=1) - 2.0 * v + np.roll(v, 1, axis=1)) / self.hphi**2
        return out

    def flat_laplacian_matrix(self):
        """CSR assembly of flat_laplacian with Neumann closure (cached)."""
        key = "lap_flat"
        if key not in self._cache:
            ns, nphi = self.Ns, self.Nphi
            inv_h2 = 1.0 / self.hs**2
            main = np.full(ns, -2.0 * inv_h2)
            off = np.full(ns - 1, inv_h2)
            ls = sp.diags([off, main, off], [-1, 0, 1], format="lil")
            # half-width end cells: ghost reflection doubles the inner flux
            ls[0, 0] = -2.0 * inv_h2
            ls[0, 1] = 2.0 * inv_h2
            ls[-1, -1] = -2.0 * inv_h2
            ls[-1, -2] = 2.0 * inv_h2
            ls = ls.tocsr()
            if nphi > 1:
                inv_p2 = 1.0 / self.hphi**2
                lp = sp.diags(
                    [np.full(nphi, -2.0 * inv_p2), np.full(nphi - 1, inv_p2), np.full(nphi - 1, inv_p2)],
                    [0, -1, 1],
                    format="lil",
                )
                lp[0, -1] = inv_p2
                lp[-1, 0] = inv_p2
                mat = sp.kron(ls, sp.eye(nphi), format="csr") + sp.kron(sp.eye(ns), lp.tocsr(), format="csr")
            else:
                mat = ls
            self._cache[key] = mat
        return self._cache[key]

    def flat_weight_vector(self):
        """Flat-register node weights flattened in s-major order."""
        key = "wflat_vec"
        if key not in self._cache:
            self._cache[key] = np.repeat(self.ws_flat, self.Nphi) * self.hphi
        return self._cache[key]

    def mass_weight_vector(self):
        key = "wmass_vec"
        if key not in self._cache:
            self._cache[key] = np.repeat(self.ws_mass, self.Nphi) * self.hphi
        return self._cache[key]


@dataclasses.dataclass
class ScalarField:
    grid: SphereGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = self.grid.as_field_values(self.values)
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("scalar field contains non-finite values")


@dataclasses.dataclass
class MetricDensity:
    """Density of a (1,1)-form against ds dphi; positive for Kahler metrics."""

    grid: SphereGrid
    rho: np.ndarray
    require_positive: bool = True

    def __post_init__(self):
        self.rho = self.grid.as_field_values(self.rho)
        if not np.all(np.isfinite(self.rho)):
            raise GeometryError("metric density contains non-finite values")
        if self.require_positive and np.min(self.rho) <= 0.0:
            raise GeometryError(f"metric density not positive (min {np.min(self.rho):.3e})")

    def mass(self):
        return self.grid.quad_mass(self.rho)


@dataclasses.dataclass(frozen=True)
class DivisorConfig:
    """Marked points with line-bundle weights and cone angles.

    points entries are either the pole symbols or (s, phi) chart pairs.
    mode 'anticanonical_smooth' requires the weights to sum to 1 (degree-2
    point set); 'snc' allows any positive weights as long as the twisted
    class stays positive (mu > 0).
    """

    points: tuple
    lambdas: tuple
    betas: tuple
    mode: str

    def __post_init__(self):
        if self.mode not in DIVISOR_MODES:
            raise GeometryError(f"unknown divisor mode {self.mode!r}")
        if not (len(self.points) == len(self.lambdas) == len(self.betas)):
            raise GeometryError("points, lambdas, betas must have equal length")
        if len(set(self.points)) != len(self.points):
            raise GeometryError("divisor points must be pairwise distinct")
        for lam in self.lambdas:
            if lam <= 0.0:
                raise GeometryError("lambda weights must be positive")
        for b in self.betas:
            if not 0.0 < b < 1.0:
                raise GeometryError("cone angles must lie in (0, 1)")
        if self.mode == "anticanonical_smooth" and abs(sum(self.lambdas) - 1.0) > 1e-12:
            raise GeometryError("anticanonical mode requires sum(lambda) = 1")
        if self.mu <= 0.0:
            raise GeometryError(f"twisted class not positive (mu = {self.mu:.4f})")

    @property
    def mu(self):
        """Residual Ricci coefficient 1 - sum(lambda_i (1 - beta_i))."""
        return 1.0 - sum(l * (1.0 - b) for l, b in zip(self.lambdas, self.betas))

    @property
    def k(self):
        return len(self.points)

    def with_betas(self, betas):
        return DivisorConfig(self.points, self.lambdas, tuple(float(b) for b in betas), self.mode)

    def is_two_pole(self):
        return set(self.points) == {POLE_0, POLE_INF}

    def validate_against_grid(self, grid):
        if self.is_two_pole():
            if self.betas[0] != self.betas[1]:
                raise GeometryError("two-pole configuration requires equal cone angles")
            if grid.symmetry_mode != "s1_z2_invariant":
                raise GeometryError("two-pole configuration requires s1_z2_invariant symmetry")
        else:
            for p in self.points:
                if p in (POLE_0, POLE_INF):
                    continue
                if isinstance(p, str):
                    raise GeometryError(f"unknown point label {p!r}")
                if grid.Nphi == 1 and abs(p[1]) > 1e-14:
                    raise GeometryError(f"point {p} needs an azimuthal grid (Nphi > 1)")
                if abs(p[0]) > grid.L:
                    raise GeometryError(f"point {p} lies outside the chart")


# ---- constructors -----------------------------------------------------


def build_grid(L, Ns, Nphi, symmetry_mode):
    """Build the chart grid with both quadrature registers.

    The mass-register end weights carry an extra 1/2, the exact tail mass of
    a density decaying like exp(-2(|s|-L)) past the truncation (the
    sech^2-class all backgrounds here belong to).
    """
    if L <= 0.0:
        raise GeometryError("chart half-length must be positive")
    if symmetry_mode not in SYMMETRY_MODES:
        raise GeometryError(f"unknown symmetry mode {symmetry_mode!r}")
    if Ns < 16:
        raise GeometryError("Ns must be at least 16")
    if symmetry_mode == "full_2d":
        if Nphi < 8:
            raise GeometryError("Nphi must be at least 8 in full_2d mode")
    else:
        if Nphi != 1:
            raise GeometryError("s1-invariant modes require Nphi = 1")
    s = np.linspace(-L, L, Ns)
    hs = s[1] - s[0]
    phi = np.arange(Nphi) * (TWO_PI / Nphi)
    ws_flat = np.full(Ns, hs)
    ws_flat[0] = ws_flat[-1] = 0.5 * hs
    ws_mass = ws_flat.copy()
    ws_mass[0] += 0.5
    ws_mass[-1] += 0.5
    return SphereGrid(
        L=float(L),
        Ns=int(Ns),
        Nphi=int(Nphi),
        symmetry_mode=symmetry_mode,
        s=s,
        phi=phi,
        hs=float(hs),
        hphi=TWO_PI / Nphi,
        ws_flat=ws_flat,
        ws_mass=ws_mass,
    )


def fubini_study(grid):
    """Round background density rho0 = sech(s)^2, class mass 4*pi."""
    rho = 1.0 / np.cosh(grid.s) ** 2
    return MetricDensity(grid, grid.as_field_values(rho))


def _chordal_sq_to_point(grid, point):
    """Squared chordal distance |z-p|^2 / ((1+|z|^2)(1+|p|^2)) on the grid."""
    s = grid.smesh()
    if point == POLE_0:
        # limit p -> 0: |z|^2/(1+|z|^2)
        return 0.5 * (1.0 + np.tanh(s))
    if point == POLE_INF:
        return 0.5 * (1.0 - np.tanh(s))
    sp_, pp = float(point[0]), float(point[1])
    ph = grid.phimesh()
    num = np.exp(2.0 * s) - 2.0 * np.exp(s + sp_) * np.cos(ph - pp) + math.exp(2.0 * sp_)
    den = (1.0 + np.exp(2.0 * s)) * (1.0 + math.exp(2.0 * sp_))
    return num / den


def divisor_norm_squared(grid, cfg, i):
    """|S_i|^2 in the Hermitian metric whose curvature is lambda_i * omega0.

    Realized as (squared chordal distance to p_i) ** (2 * lambda_i), which
    vanishes to order 4*lambda_i in |z - p_i| (order 2 at the lambda = 1/2
    weights used by every pinned configuration) and is bounded by handy
    closed forms: the two-pole product is sech(s)^2 / 4.
    """
    cfg.validate_against_grid(grid)
    point = cfg.points[i]
    lam = cfg.lambdas[i]
    return ScalarField(grid, _chordal_sq_to_point(grid, point) ** (2.0 * lam))


def divisor_norm_squared_product(grid, cfg):
    out = np.ones(grid.shape)
    for i in range(cfg.k):
        out = out * divisor_norm_squared(grid, cfg, i).values
    return ScalarField(grid, out)


def divisor_cell_mask(grid, cfg):
    """Nodes within one cell of an on-chart divisor point, as a bool field.

    Pole-symbol points live off the chart and contribute nothing. The mask
    is what singular-shift quadratures drop; the excluded set shrinks under
    refinement, so masked integrals of L^1 integrands are stable (checked
    in the test suite, not enforced here).
    """
    mask = np.zeros(grid.shape, dtype=bool)
    for p in cfg.points:
        if isinstance(p, str):
            continue
        near_s = np.abs(grid.s[:, None] - p[0]) <= grid.hs * (1.0 + 1e-12)
        dphi = np.abs((grid.phi[None, :] - p[1] + np.pi) % (2.0 * np.pi) - np.pi)
        near_phi = dphi <= grid.hphi * (1.0 + 1e-12)
        mask |= near_s & near_phi
    return mask


def smoothed_divisor_form(grid, cfg, i, eps):
    """Smooth positive form lambda_i*rho0 + (1/2)lap log(|S_i|^2 + eps).

    Its total mass is 4*pi*lambda_i for every eps > 0 (the correction is an
    exact form); as eps -> 0 it concentrates on the divisor point. The
    discrete density can undershoot zero by O(1e-9) in the truncation tails
    (the chart-end rows of the flux Laplacian assume zero slope), so
    positivity is not enforced nodewise here.
    """
    if eps <= 0.0:
        raise GeometryError("smoothing parameter must be positive")
    s2 = divisor_norm_squared(grid, cfg, i).values
    rho0 = fubini_study(grid).rho
    rho = cfg.lambdas[i] * rho0 + 0.5 * grid.flat_laplacian(np.log(s2 + eps))
    return MetricDensity(grid, rho, require_positive=False)


def smoothed_divisor_form_total(grid, cfg, eps):
    """Sum over divisor points, total mass 4*pi*sum(lambda)."""
    rho0 = fubini_study(grid).rho
    total = sum(cfg.lambdas) * rho0
    for i in range(cfg.k):
        s2 = divisor_norm_squared(grid, cfg, i).values
        total = total + 0.5 * grid.flat_laplacian(np.log(s2 + eps))
    return MetricDensity(grid, total)


# ---- curvature and potentials -----------------------------------------


def ricci_density(metric):
    """Ricci form density of a metric, computed relative to the background.

    ricci(rho) = rho0 - (1/2) lap log(rho / rho0). The background split makes
    ricci(rho0) == rho0 exact in floating point (the continuum identity
    -1/2 lap log sech^2 = sech^2 absorbed analytically) and leaves a smooth,
    boundary-flat log-ratio for every density in the bounded-potential class.
    """
    grid = metric.grid
    rho0 = fubini_study(grid).rho
    log_ratio = np.log(metric.rho / rho0)
    return MetricDensity(grid, rho0 - 0.5 * grid.flat_laplacian(log_ratio), require_positive=False)


def solve_poisson_free_constant(grid, source_values, tol=1e-9):
    """Solve (1/2) lap u = source - kappa, flat-mean-zero u, free kappa.

    The bordered system keeps the solvability defect in kappa instead of
    smearing it over the solution; kappa is returned so callers can reject
    sources that are not exact-form corrections.
    """
    src = grid.as_field_values(source_values).ravel()
    lap = grid.flat_laplacian_matrix()
    w = grid.flat_weight_vector()
    n = grid.n_nodes
    wdiag = sp.diags(w)
    a = 0.5 * (wdiag @ lap)
    k = sp.bmat([[a, -w[:, None]], [w[None, :], None]], format="csc")
    rhs = np.concatenate([w * src, [0.0]])
    sol = spla.splu(k).solve(rhs)
    u = sol[:n].reshape(grid.shape)
    kappa = float(sol[n])
    return u, kappa


def ricci_potential(metric, defect_tol=1e-6):
    """Potential h with ricci(rho) - rho = (1/2) lap h, normalized sup h = 0.

    Raises if the solvability defect (the free constant of the Poisson
    solve) exceeds defect_tol, which signals a density outside the
    background cohomology class.
    """
    grid = metric.grid
    source = ricci_density(metric).rho - metric.rho
    u, kappa = solve_poisson_free_constant(grid, source)
    if abs(kappa) > defect_tol:
        raise GeometryError(f"Ricci potential solvability defect {kappa:.3e} exceeds {defect_tol:.1e}")
    u = u - np.max(u)
    return ScalarField(grid, u)


# ---- pointwise utilities ----------------------------------------------


def laplace_beltrami(metric, field):
    """Metric Laplacian (1/(2 rho)) * flat_laplacian(f)."""
    grid = metric.grid
    f = field.values if isinstance(field, ScalarField) else grid.as_field_values(field)
    return ScalarField(grid, 0.5 * grid.flat_laplacian(f) / metric.rho)


def integrate(field, metric):
    """Integral of a scalar field against the metric measure (mass register)."""
    grid = metric.grid
    f = field.values if isinstance(field, ScalarField) else grid.as_field_values(field)
    return grid.quad_mass(f * metric.rho)


def oscillation(field):
    v = field.values if isinstance(field, ScalarField) else np.asarray(field)
    return float(np.max(v) - np.min(v))
