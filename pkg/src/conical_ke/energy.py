"""Energy functionals in closed form.

Every path-defined functional is evaluated by its n = 1 closed form
(mixed quadratic sums for the Aubin family, the explicit entropy formula
for the Mabuchi energy); no dt quadrature appears outside the test oracles.
All sums use the flat quadrature register, under which
sum(w * lap(phi)) == 0 exactly, so every lambda = 1 functional below is
invariant under phi -> phi + const in exact arithmetic.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import geometry
from .geometry import divisor_norm_squared, fubini_study


def _phi_values(grid, phi):
    v = getattr(phi, "values", phi)
    return grid.as_field_values(v)


def _metric_parts(grid, phi):
    """(phi, rho0, rho_phi) with rho_phi = rho0 + (1/2)lap(phi)."""
    v = _phi_values(grid, phi)
    rho0 = fubini_study(grid).rho
    return v, rho0, rho0 + 0.5 * grid.flat_laplacian(v)


def aubin_i(grid, phi):
    """I(phi) = int phi (omega0 - omega_phi); nonnegative quadratic."""
    v, rho0, rho = _metric_parts(grid, phi)
    return grid.quad_flat(v * (rho0 - rho))


def aubin_j(grid, phi):
    """J via the Aubin-Mabuchi average; identically I/2 at n = 1."""
    v, rho0, rho = _metric_parts(grid, phi)
    p0 = grid.quad_flat(v * rho0)
    return p0 - 0.5 * (p0 + grid.quad_flat(v * rho))


def j_background(grid, phi):
    """J_omega0 = (I - J)(phi)."""
    return aubin_i(grid, phi) - aubin_j(grid, phi)


def j_twisted(grid, phi, lam=1.0, shift=None, exclude=None):
    """J functional twisted by the class alpha = lam*omega0 + i del dbar(shift).

    Defined by the variation dJ = int phidot (alpha - lam*omega_phi), the
    weight lam = mass(alpha)/(4 pi) being the one that keeps J invariant
    under phi -> phi + const for every lam (both terms of the variation then
    pair a constant with total mass 4*pi*lam). Closed form at n = 1:
        lam * I(phi)/2 + int shift (omega_phi - omega0).
    A singular shift (log of a section norm vanishing on-grid) is handled by
    masking nodes near the divisor with `exclude`; stability of the masked
    quadrature under refinement is checked in the test suite.
    """
    v, rho0, rho = _metric_parts(grid, phi)
    value = 0.5 * lam * aubin_i(grid, phi)
    if shift is not None:
        sh = _phi_values(grid, shift)
        contrib = sh * (rho - rho0)
        if exclude is not None:
            contrib = np.where(exclude, 0.0, contrib)
        value += grid.quad_flat(contrib)
    return value


def mabuchi_energy(grid, phi, ricci_pot=None):
    """Explicit formula E = int log(rho/(e^h rho0)) rho - J_omega0 + int h rho0."""
    v, rho0, rho = _metric_parts(grid, phi)
    if np.min(rho) <= 0.0:
        raise geometry.GeometryError("Mabuchi energy needs a Kahler-positive potential")
    h = grid.zeros() if ricci_pot is None else _phi_values(grid, ricci_pot)
    entropy = grid.quad_flat((np.log(rho / rho0) - h) * rho)
    return entropy - j_background(grid, phi) + grid.quad_flat(h * rho0)


def _divisor_shift_terms(grid, cfg, eps=None):
    """Per-divisor (lambda_i, shift log(|S_i|^2 + eps)) pairs; eps None = raw."""
    out = []
    for i in range(0 if cfg is None else cfg.k):
        s2 = divisor_norm_squared(grid, cfg, i).values
        with np.errstate(divide="ignore"):
            shift = np.log(s2) if eps is None else np.log(s2 + eps)
        out.append((cfg.lambdas[i], shift))
    return out


def log_mabuchi_energy(grid, phi, cfg, ricci_pot=None, exclude=None):
    """E + sum_i (1 - beta_i) J_{chi_i} with the raw (singular) divisor shifts.

    The raw shift log|S_i|^2 is integrable but unbounded; nodes within one
    cell of an on-chart divisor point are dropped from its quadrature (the
    excluded mass vanishes under refinement). Pole-symbol divisors need no
    mask, their singular locus is off the chart.
    """
    value = mabuchi_energy(grid, phi, ricci_pot)
    if cfg is None:
        return value
    cell_mask = geometry.divisor_cell_mask(grid, cfg)
    for i, (lam, shift) in enumerate(_divisor_shift_terms(grid, cfg)):
        mask = cell_mask | ~np.isfinite(shift)
        if exclude is not None:
            mask = mask | grid.as_field_values(exclude).astype(bool)
        value += (1.0 - cfg.betas[i]) * j_twisted(grid, phi, lam, shift, exclude=mask)
    return value


def smoothed_log_mabuchi_energy(grid, phi, cfg, eps, ricci_pot=None):
    """E + sum_i (1 - beta_i) J_{chi_i,eps} with mollified shifts."""
    value = mabuchi_energy(grid, phi, ricci_pot)
    if cfg is None:
        return value
    for i, (lam, shift) in enumerate(_divisor_shift_terms(grid, cfg, eps)):
        value += (1.0 - cfg.betas[i]) * j_twisted(grid, phi, lam, shift)
    return value


def modified_log_mabuchi_energy(grid, phi, cfg, beta_prime, eps, phi_eps, ricci_pot=None):
    """Smoothed log-Mabuchi energy plus (mu - beta_prime) * J_{omega_{phi_eps}}.

    The extra term twists by the smooth approximant's own Kahler class
    (lam = 1, shift = phi_eps); for the two-pole anticanonical divisor mu
    equals the common cone angle, recovering the documented form. Requires
    beta_prime <= mu; equality degenerates to the smoothed energy.
    """
    mu = 1.0 if cfg is None else cfg.mu
    if beta_prime > mu:
        raise ValueError(f"audit angle {beta_prime} must not exceed the target {mu}")
    value = smoothed_log_mabuchi_energy(grid, phi, cfg, eps, ricci_pot)
    shift = _phi_values(grid, phi_eps)
    return value + (mu - beta_prime) * j_twisted(grid, phi, 1.0, shift)


def coercivity_constant(grid, cfg, beta_prime, eps, phi_eps):
    """Explicit constant C with modified energy >= (mu - beta_prime) J_omega0 - C.

    C = 2(mu - beta_prime)*sup|phi_eps|
        + sum_i (1 - beta_i) * (sup log(|S_i|^2 + 1) - int log|S_i|^2 omega0).
    """
    mu = 1.0 if cfg is None else cfg.mu
    if beta_prime > mu:
        raise ValueError(f"audit angle {beta_prime} must not exceed the target {mu}")
    v = _phi_values(grid, phi_eps)
    c = 2.0 * (mu - beta_prime) * float(np.max(np.abs(v)))
    rho0 = fubini_study(grid)
    for i in range(0 if cfg is None else cfg.k):
        s2 = divisor_norm_squared(grid, cfg, i).values
        with np.errstate(divide="ignore"):
            logs2 = np.log(s2)
        logs2 = np.where(np.isfinite(logs2), logs2, 0.0)  # drop on-node zeros
        c += (1.0 - cfg.betas[i]) * (
            float(np.max(np.log(s2 + 1.0))) - geometry.integrate(logs2, rho0)
        )
    return c


@dataclasses.dataclass
class FunctionalReport:
    """All functionals of one state, one row of the CSV contract."""

    I: float
    J: float
    J_omega0: float
    E: float
    E_logD: float
    E_logD_eps: float
    E_modified: dict  # audited angle -> value
    J_chi_eps: tuple  # per divisor point
    J_omega_phi_eps: float
    coercivity_C: dict  # audited angle -> explicit constant
    beta: tuple
    beta_prime: tuple
    eps: float

    def __post_init__(self):
        if self.I < -1e-12:
            raise ValueError(f"I functional negative: {self.I:.3e}")
        n = 1
        lo, hi = self.I / (n + 1) - 1e-12, self.I + 1e-12
        if not lo <= self.J_omega0 <= hi:
            raise ValueError(f"Aubin comparison violated: I={self.I:.3e} J_omega0={self.J_omega0:.3e}")


def functional_report(grid, phi, cfg, eps, phi_eps, audit_angles, ricci_pot=None):
    """Evaluate the full functional family on one potential."""
    mu = 1.0 if cfg is None else cfg.mu
    e_plain = mabuchi_energy(grid, phi, ricci_pot)
    report = FunctionalReport(
        I=aubin_i(grid, phi),
        J=aubin_j(grid, phi),
        J_omega0=j_background(grid, phi),
        E=e_plain,
        E_logD=log_mabuchi_energy(grid, phi, cfg, ricci_pot),
        E_logD_eps=smoothed_log_mabuchi_energy(grid, phi, cfg, eps, ricci_pot),
        E_modified={
            bp: modified_log_mabuchi_energy(grid, phi, cfg, bp, eps, phi_eps, ricci_pot)
            for bp in audit_angles
        },
        J_chi_eps=tuple(
            j_twisted(grid, phi, lam, shift) for lam, shift in _divisor_shift_terms(grid, cfg, eps)
        ),
        J_omega_phi_eps=j_twisted(grid, phi, 1.0, _phi_values(grid, phi_eps)),
        coercivity_C={bp: coercivity_constant(grid, cfg, bp, eps, phi_eps) for bp in audit_angles},
        beta=(1.0,) if cfg is None else cfg.betas,
        beta_prime=tuple(audit_angles),
        eps=float(eps),
    )
    return report
