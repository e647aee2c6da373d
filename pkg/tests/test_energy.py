"""Closed-form functionals against dt-quadrature of their defining variations.

The library evaluates every path-defined functional in closed form; the
oracles integrate the defining one-forms along explicit paths with
Gauss-Legendre dt-quadrature. Agreement on a linear and on a bent path
(same endpoints, different interiors) checks the closed forms and path
independence at once. Both paths stay inside the Kahler cone whenever the
endpoints and the bend do, see oracles.random_cone_potential.
"""

import math

import numpy as np
import pytest

import oracles
from conical_ke import energy, geometry, ma_core


def both_paths(grid, phi, bump):
    return (oracles.linear_path(phi), oracles.bent_path(grid, phi, bump))


# ---- Aubin family ----------------------------------------------------------


def test_aubin_vanishes_on_constants(grid_1d):
    c = grid_1d.as_field_values(np.full(grid_1d.shape, 3.7))
    assert energy.aubin_i(grid_1d, c) == 0.0
    assert energy.aubin_j(grid_1d, c) == 0.0
    assert energy.j_background(grid_1d, c) == 0.0


def test_aubin_tanh_profile_closed_form():
    # I(a tanh s) = a^2 int tanh^2 sech^2 = 4 pi a^2 / 3 on the full line;
    # the finite chart misses only an exponentially small tail.
    grid = geometry.build_grid(12.0, 1024, 1, "s1_invariant")
    a = 0.1
    phi = grid.as_field_values(a * np.tanh(grid.s))
    i_val = energy.aubin_i(grid, phi)
    exact = 4.0 * math.pi * a * a / 3.0
    assert i_val > 0.0
    assert abs(i_val - exact) / exact < 2e-4
    j0 = energy.j_background(grid, phi)
    assert 0.5 * i_val - 1e-12 <= j0 <= i_val + 1e-12


def test_aubin_identities_on_samples(grid_1d, grid_2d, rng):
    for grid in (grid_1d, grid_2d):
        for _ in range(5):
            phi = oracles.random_cone_potential(grid, rng)
            i_val = energy.aubin_i(grid, phi)
            j_val = energy.aubin_j(grid, phi)
            j0 = energy.j_background(grid, phi)
            scale = 1.0 + abs(i_val)
            assert i_val >= 0.0
            assert abs(j_val - 0.5 * i_val) < 1e-12 * scale
            assert abs(j0 - (i_val - j_val)) < 1e-12 * scale
            assert 0.5 * i_val - 1e-10 <= j0 <= i_val + 1e-10


def test_aubin_j_matches_dt_quadrature(grid_1d_free, rng):
    phi = oracles.random_cone_potential(grid_1d_free, rng)
    bump = oracles.random_cone_potential(grid_1d_free, rng, n_bumps=2)
    closed = energy.aubin_j(grid_1d_free, phi)
    for path, dot in both_paths(grid_1d_free, phi, bump):
        q = oracles.quad_increment(grid_1d_free, path, dot, oracles.aubin_j_form(grid_1d_free))
        assert abs(q - closed) < 1e-11 * (1.0 + abs(closed))


# ---- twisted J -------------------------------------------------------------


def test_twisted_j_matches_dt_quadrature(grid_1d_free, rng):
    phi = oracles.random_cone_potential(grid_1d_free, rng)
    bump = oracles.random_cone_potential(grid_1d_free, rng, n_bumps=2)
    shift = grid_1d_free.as_field_values(0.7 * np.exp(-0.5 * grid_1d_free.s**2))
    for lam in (0.3, 1.0, 1.7):
        closed = energy.j_twisted(grid_1d_free, phi, lam, shift)
        form = oracles.twisted_j_form(grid_1d_free, lam, shift)
        for path, dot in both_paths(grid_1d_free, phi, bump):
            q = oracles.quad_increment(grid_1d_free, path, dot, form)
            assert abs(q - closed) < 1e-11 * (1.0 + abs(closed))


def test_twisted_j_trivial_cases(grid_1d, rng):
    phi = oracles.random_cone_potential(grid_1d, rng)
    shift = grid_1d.as_field_values(np.exp(-grid_1d.s**2))
    # zero potential: the defining path is constant for every class
    assert energy.j_twisted(grid_1d, grid_1d.zeros(), 1.3, shift) == 0.0
    # no shift at unit weight reduces to half of I, i.e. J_omega0 at n = 1
    assert energy.j_twisted(grid_1d, phi, 1.0, None) == pytest.approx(
        energy.j_background(grid_1d, phi), rel=1e-13
    )


def test_twisted_j_shift_identity(grid_1d, rng):
    # j(phi, lam, shift) - j(phi, lam, 0) = int shift (omega_phi - omega0);
    # cross-checked by register-free Simpson quadrature
    phi = oracles.random_cone_potential(grid_1d, rng)
    shift = grid_1d.as_field_values(0.4 * np.exp(-0.5 * (grid_1d.s - 1.0) ** 2))
    shift = grid_1d.symmetrize(shift.copy())
    gap = energy.j_twisted(grid_1d, phi, 0.8, shift) - energy.j_twisted(grid_1d, phi, 0.8, None)
    pairing = shift * 0.5 * grid_1d.flat_laplacian(phi)
    assert gap == pytest.approx(grid_1d.quad_flat(pairing), abs=1e-12)
    assert gap == pytest.approx(oracles.simpson_mass(grid_1d, pairing), rel=1e-6, abs=1e-8)


def test_all_functionals_invariant_under_constant_shift(grid_1d, two_pole, rng):
    cfg = two_pole(0.7)
    eps = 1e-2
    _, phi_eps = ma_core.smooth_volume_family(grid_1d, cfg, eps)
    phi = oracles.random_cone_potential(grid_1d, rng)
    shift = grid_1d.as_field_values(0.7 * np.exp(-0.5 * grid_1d.s**2))
    functionals = [
        lambda v: energy.aubin_i(grid_1d, v),
        lambda v: energy.aubin_j(grid_1d, v),
        lambda v: energy.j_background(grid_1d, v),
        lambda v: energy.j_twisted(grid_1d, v, 0.3, shift),
        lambda v: energy.j_twisted(grid_1d, v, 1.7, shift),
        lambda v: energy.mabuchi_energy(grid_1d, v),
        lambda v: energy.log_mabuchi_energy(grid_1d, v, cfg),
        lambda v: energy.smoothed_log_mabuchi_energy(grid_1d, v, cfg, eps),
        lambda v: energy.modified_log_mabuchi_energy(grid_1d, v, cfg, 0.6, eps, phi_eps),
    ]
    for f in functionals:
        assert abs(f(phi + 5.0) - f(phi)) < 1e-10


# ---- Mabuchi energy --------------------------------------------------------


def test_mabuchi_vanishes_at_background(grid_1d):
    h = grid_1d.as_field_values(0.3 * np.exp(-grid_1d.s**2))
    assert energy.mabuchi_energy(grid_1d, grid_1d.zeros()) == 0.0
    c = grid_1d.as_field_values(np.full(grid_1d.shape, -2.0))
    assert energy.mabuchi_energy(grid_1d, c) == 0.0
    # a background ricci potential only shifts the entropy reference
    assert abs(energy.mabuchi_energy(grid_1d, c, h)) < 1e-12


def test_mabuchi_matches_64pt_linear_quadrature(grid_1d_free, rng):
    # moderate samples: the t-integrand develops endpoint layers when the
    # density ratio to the background blows up near the chart ends, and
    # 64 Gauss points stop resolving it
    for _ in range(6):
        phi = oracles.random_cone_potential(
            grid_1d_free, rng, fill=0.5, reach=0.15, rates=(1.0, 1.0)
        )
        closed = energy.mabuchi_energy(grid_1d_free, phi)
        q = oracles.quad_increment(
            grid_1d_free, *oracles.linear_path(phi), oracles.mabuchi_form(grid_1d_free), npts=64
        )
        assert abs(q - closed) <= 1e-6 * (1.0 + abs(closed))


def test_mabuchi_two_path_quadrature(grid_1d_free, rng):
    # harsher samples need deeper quadrature; 256 points leave an order of
    # magnitude under the 1e-6 relative target on both paths
    for _ in range(3):
        phi = oracles.random_cone_potential(grid_1d_free, rng)
        bump = oracles.random_cone_potential(grid_1d_free, rng, n_bumps=2)
        closed = energy.mabuchi_energy(grid_1d_free, phi)
        for path, dot in both_paths(grid_1d_free, phi, bump):
            q = oracles.quad_increment(
                grid_1d_free, path, dot, oracles.mabuchi_form(grid_1d_free), npts=256
            )
            assert abs(q - closed) <= 1e-6 * abs(closed)


def test_mabuchi_with_ricci_potential_matches_quadrature(grid_1d_free, rng):
    h = grid_1d_free.as_field_values(0.3 * np.exp(-grid_1d_free.s**2))
    phi = oracles.random_cone_potential(grid_1d_free, rng, fill=0.5, reach=0.15, rates=(1.0, 1.0))
    closed = energy.mabuchi_energy(grid_1d_free, phi, h)
    q = oracles.quad_increment(
        grid_1d_free, *oracles.linear_path(phi), oracles.mabuchi_form(grid_1d_free, h), npts=64
    )
    assert abs(q - closed) <= 1e-6 * (1.0 + abs(closed))


def test_mabuchi_requires_positive_density(grid_1d):
    # (1/2) lap of 3 exp(-s^2/2) is -3/2 at s = 0, driving the density under 0
    phi = grid_1d.as_field_values(3.0 * np.exp(-0.5 * grid_1d.s**2))
    with pytest.raises(geometry.GeometryError):
        energy.mabuchi_energy(grid_1d, phi)


# ---- divisor-weighted energies ---------------------------------------------


def test_log_mabuchi_without_divisor_reduces_to_mabuchi(grid_1d, rng):
    phi = oracles.random_cone_potential(grid_1d, rng)
    e = energy.mabuchi_energy(grid_1d, phi)
    assert energy.log_mabuchi_energy(grid_1d, phi, None) == e
    assert energy.smoothed_log_mabuchi_energy(grid_1d, phi, None, 1e-3) == e
    assert energy.log_mabuchi_energy(grid_1d, grid_1d.zeros(), None) == 0.0


def test_log_mabuchi_two_pole_matches_dt_quadrature(grid_1d, two_pole, rng):
    # raw shifts are finite on the chart for pole divisors, so the singular
    # energy itself can be dt-quadrature checked
    cfg = two_pole(0.7)
    phi = oracles.random_cone_potential(grid_1d, rng)
    bump = oracles.random_cone_potential(grid_1d, rng, n_bumps=2)
    closed = energy.log_mabuchi_energy(grid_1d, phi, cfg)
    for path, dot in both_paths(grid_1d, phi, bump):
        total = oracles.quad_increment(
            grid_1d, path, dot, oracles.mabuchi_form(grid_1d), npts=256
        )
        for i in range(cfg.k):
            s2 = geometry.divisor_norm_squared(grid_1d, cfg, i).values
            total += (1.0 - cfg.betas[i]) * oracles.quad_increment(
                grid_1d, path, dot,
                oracles.twisted_j_form(grid_1d, cfg.lambdas[i], np.log(s2)), npts=256,
            )
        assert abs(total - closed) < 1e-7 * (1.0 + abs(closed))


def test_smoothed_energy_approaches_raw_on_smooth_potential(grid_1d, two_pole):
    # rate-2 tails (a potential smooth across the poles) give the fast
    # mollification limit; the gap at eps = 1e-6 sits under 1e-4
    cfg = two_pole(0.7)
    phi = grid_1d.as_field_values(0.4 * np.exp(-0.5 * grid_1d.s**2))
    raw = energy.log_mabuchi_energy(grid_1d, phi, cfg)
    gaps = [
        abs(energy.smoothed_log_mabuchi_energy(grid_1d, phi, cfg, e) - raw)
        for e in (1e-2, 1e-4, 1e-6)
    ]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= 1e-4


def test_smoothed_energy_trend_on_conical_samples(grid_1d, two_pole, rng):
    # sampler tails are slower than rate 2, so the limit is slower too;
    # only monotonicity is asserted
    cfg = two_pole(0.7)
    for _ in range(3):
        phi = oracles.random_cone_potential(grid_1d, rng)
        raw = energy.log_mabuchi_energy(grid_1d, phi, cfg)
        gaps = [
            abs(energy.smoothed_log_mabuchi_energy(grid_1d, phi, cfg, e) - raw)
            for e in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
        ]
        assert all(gaps[i] > gaps[i + 1] for i in range(len(gaps) - 1))


def test_masked_quadrature_refinement_stability():
    # an on-node divisor point forces the one-cell mask; the masked raw
    # energy settles under s-refinement that keeps the point on a node
    point = (0.0, math.pi / 2.0)
    vals = []
    for ns in (65, 129, 257):
        grid = geometry.build_grid(12.0, ns, 16, "full_2d")
        cfg = geometry.DivisorConfig(
            mode="snc", points=(point,), lambdas=(0.5,), betas=(0.8,)
        )
        s2 = geometry.divisor_norm_squared(grid, cfg, 0).values
        assert np.sum(s2 == 0.0) == 1
        assert np.sum(geometry.divisor_cell_mask(grid, cfg)) == 9
        smesh = grid.s[:, None]
        phi = grid.as_field_values(
            0.6 * np.exp(-0.5 * smesh**2) * (1.0 + 0.25 * np.cos(2.0 * grid.phi[None, :]))
        )
        vals.append(energy.log_mabuchi_energy(grid, phi, cfg))
    assert all(np.isfinite(vals))
    diffs = [abs(vals[1] - vals[0]), abs(vals[2] - vals[1])]
    assert diffs[0] / diffs[1] > 1.8
    assert diffs[1] < 5e-3


def test_pole_divisors_need_no_mask(grid_1d, two_pole):
    assert np.sum(geometry.divisor_cell_mask(grid_1d, two_pole(0.7))) == 0


def test_smoothing_difference_lower_bound(grid_1d, two_pole, rng):
    # per divisor, J_eps - J_raw >= -sup log(|S|^2 + 1) + int log|S|^2 omega0;
    # the integral is exactly -4 pi for either pole section at weight 1/2
    cfg = two_pole(0.7)
    s2 = geometry.divisor_norm_squared(grid_1d, cfg, 0).values
    lib_integral = geometry.integrate(np.log(s2), geometry.fubini_study(grid_1d))
    assert lib_integral == pytest.approx(-4.0 * math.pi, abs=1e-8)
    rhs = -math.log(1.0 + float(np.max(s2))) - 4.0 * math.pi
    for _ in range(17):
        phi = oracles.random_cone_potential(grid_1d, rng)
        for i in range(cfg.k):
            s2i = geometry.divisor_norm_squared(grid_1d, cfg, i).values
            j_raw = energy.j_twisted(grid_1d, phi, cfg.lambdas[i], np.log(s2i))
            for eps in (1e-1, 1e-2, 1e-3):
                j_eps = energy.j_twisted(grid_1d, phi, cfg.lambdas[i], np.log(s2i + eps))
                assert j_eps - j_raw >= rhs


# ---- modified energy and coercivity ----------------------------------------


def test_modified_energy_angle_guard(grid_1d, two_pole):
    cfg = two_pole(0.7)  # mu = 0.7
    _, phi_eps = ma_core.smooth_volume_family(grid_1d, cfg, 1e-2)
    phi = grid_1d.zeros()
    with pytest.raises(ValueError):
        energy.modified_log_mabuchi_energy(grid_1d, phi, cfg, 0.75, 1e-2, phi_eps)
    with pytest.raises(ValueError):
        energy.coercivity_constant(grid_1d, cfg, 0.75, 1e-2, phi_eps)
    # equality degenerates to the smoothed energy, coefficient zero
    sm = energy.smoothed_log_mabuchi_energy(grid_1d, phi, cfg, 1e-2)
    md = energy.modified_log_mabuchi_energy(grid_1d, phi, cfg, cfg.mu, 1e-2, phi_eps)
    assert md == sm


def test_coercivity_constant_trivial_zero(grid_1d):
    assert energy.coercivity_constant(grid_1d, None, 1.0, 1e-2, grid_1d.zeros()) == 0.0


def test_coercivity_constant_two_pole_pieces(grid_1d, two_pole):
    # independent recompute from closed forms: both pole sections peak at
    # (1 + tanh L)/2 and integrate log to -4 pi
    cfg = two_pole(0.7)
    eps = 1e-2
    _, phi_eps = ma_core.smooth_volume_family(grid_1d, cfg, eps)
    bp = 0.6
    c_lib = energy.coercivity_constant(grid_1d, cfg, bp, eps, phi_eps)
    peak = (1.0 + math.tanh(grid_1d.L)) / 2.0
    c_ref = 2.0 * (cfg.mu - bp) * float(np.max(np.abs(phi_eps.values)))
    c_ref += 2.0 * (1.0 - 0.7) * (math.log(1.0 + peak) + 4.0 * math.pi)
    assert c_lib == pytest.approx(c_ref, rel=1e-8)


def test_coercivity_inequality_on_samples(grid_1d, two_pole, rng):
    cfg = two_pole(0.7)
    eps = 1e-2
    _, phi_eps = ma_core.smooth_volume_family(grid_1d, cfg, eps)
    for _ in range(20):
        phi = oracles.random_cone_potential(grid_1d, rng)
        for bp in (0.6, 0.65):
            lhs = energy.modified_log_mabuchi_energy(grid_1d, phi, cfg, bp, eps, phi_eps)
            rhs = (cfg.mu - bp) * energy.j_background(grid_1d, phi)
            rhs -= energy.coercivity_constant(grid_1d, cfg, bp, eps, phi_eps)
            assert lhs >= rhs


# ---- report ----------------------------------------------------------------


def _report_kwargs(**over):
    base = dict(
        I=1.0, J=0.5, J_omega0=0.5, E=0.0, E_logD=0.0, E_logD_eps=0.0,
        E_modified={}, J_chi_eps=(), J_omega_phi_eps=0.0, coercivity_C={},
        beta=(0.7, 0.7), beta_prime=(0.6,), eps=1e-2,
    )
    base.update(over)
    return base


def test_report_rejects_negative_i():
    with pytest.raises(ValueError):
        energy.FunctionalReport(**_report_kwargs(I=-1.0))


def test_report_rejects_aubin_violation():
    with pytest.raises(ValueError):
        energy.FunctionalReport(**_report_kwargs(J_omega0=1.5))
    with pytest.raises(ValueError):
        energy.FunctionalReport(**_report_kwargs(J_omega0=0.3))


def test_functional_report_consistency(grid_1d, two_pole, rng):
    cfg = two_pole(0.7)
    eps = 1e-2
    _, phi_eps = ma_core.smooth_volume_family(grid_1d, cfg, eps)
    phi = oracles.random_cone_potential(grid_1d, rng)
    angles = (0.6, 0.5)
    rep = energy.functional_report(grid_1d, phi, cfg, eps, phi_eps, angles)
    assert rep.J == pytest.approx(0.5 * rep.I, rel=1e-12)
    assert rep.J_omega0 == pytest.approx(rep.I - rep.J, rel=1e-12)
    assert rep.E_logD_eps == energy.smoothed_log_mabuchi_energy(grid_1d, phi, cfg, eps)
    assert set(rep.E_modified) == set(angles) == set(rep.coercivity_C)
    assert len(rep.J_chi_eps) == cfg.k
    assert rep.eps == eps and rep.beta == cfg.betas and rep.beta_prime == angles
    for bp in angles:
        # the modified value decomposes exactly over the reported pieces
        assert rep.E_modified[bp] == pytest.approx(
            rep.E_logD_eps + (cfg.mu - bp) * rep.J_omega_phi_eps, rel=1e-12
        )
        assert rep.E_modified[bp] >= (cfg.mu - bp) * rep.J_omega0 - rep.coercivity_C[bp]
