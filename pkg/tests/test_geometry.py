import math

import numpy as np
import pytest

import oracles
from conical_ke import geometry


def test_build_grid_rejects_bad_input():
    with pytest.raises(geometry.GeometryError):
        geometry.build_grid(-1.0, 256, 1, "s1_invariant")
    with pytest.raises(geometry.GeometryError):
        geometry.build_grid(12.0, 8, 1, "s1_invariant")
    with pytest.raises(geometry.GeometryError):
        geometry.build_grid(12.0, 256, 4, "full_2d")
    with pytest.raises(geometry.GeometryError):
        geometry.build_grid(12.0, 256, 16, "s1_invariant")
    with pytest.raises(geometry.GeometryError):
        geometry.build_grid(12.0, 256, 1, "cylindrical")


def test_background_mass_is_sphere_mass(grid_1d, grid_2d):
    for g in (grid_1d, grid_2d):
        assert geometry.fubini_study(g).mass() == pytest.approx(4.0 * math.pi, abs=1e-6)


def test_flat_register_matches_simpson_and_analytic_interior(grid_1d):
    # two independent routes to the chart-interior integral
    for b in (0.6, 0.8, 1.0):
        rho = oracles.cone_pair_density(grid_1d.s, b)
        exact = oracles.sech2_family_interior_mass(b, grid_1d.L)
        assert grid_1d.quad_flat(rho) == pytest.approx(exact, abs=1e-7)
        assert oracles.simpson_mass(grid_1d, rho) == pytest.approx(exact, abs=1e-7)


def test_mass_register_tail_cap_model(grid_1d):
    # the end caps carry the exact tail of rate-2 decay; slower-decaying
    # members of the sech^2 family deviate by the documented model mismatch
    rho0 = oracles.cone_pair_density(grid_1d.s, 1.0)
    assert grid_1d.quad_mass(rho0) == pytest.approx(4.0 * math.pi, abs=1e-9)
    for b in (0.6, 0.8):
        rho = oracles.cone_pair_density(grid_1d.s, b)
        cap_mismatch = (
            2.0 * math.pi * 2.0 * float(rho[0]) * abs(0.5 / b - 0.5)
        )
        err = abs(grid_1d.quad_mass(rho) - 4.0 * math.pi)
        assert err <= 1.02 * cap_mismatch + 1e-8


def test_flat_laplacian_self_adjoint_and_mean_free(grid_2d, rng):
    f = oracles.random_cone_potential(grid_2d, rng)
    g = oracles.random_cone_potential(grid_2d, rng)
    assert grid_2d.quad_flat(grid_2d.flat_laplacian(f)) == pytest.approx(0.0, abs=1e-12)
    assert grid_2d.quad_flat(f * grid_2d.flat_laplacian(g)) == pytest.approx(
        grid_2d.quad_flat(g * grid_2d.flat_laplacian(f)), abs=1e-12
    )


def test_flat_laplacian_matrix_matches_operator(grid_2d, rng):
    f = oracles.random_cone_potential(grid_2d, rng)
    by_matrix = (grid_2d.flat_laplacian_matrix() @ f.ravel()).reshape(grid_2d.shape)
    assert np.max(np.abs(by_matrix - grid_2d.flat_laplacian(f))) < 1e-11


def test_as_field_values_broadcasts_and_rejects(grid_2d):
    assert grid_2d.as_field_values(1.5).shape == grid_2d.shape
    profile = np.tanh(grid_2d.s)
    full = grid_2d.as_field_values(profile)
    assert np.all(full[:, 0] == full[:, -1])
    with pytest.raises(geometry.GeometryError):
        grid_2d.as_field_values(np.zeros((3, 3)))


def test_symmetrize_projects_each_mode(rng):
    g = geometry.build_grid(12.0, 64, 16, "full_2d")
    v = rng.standard_normal(g.shape)
    assert np.array_equal(g.symmetrize(v), v)
    gz = geometry.build_grid(12.0, 64, 1, "s1_z2_invariant")
    w = gz.symmetrize(rng.standard_normal(gz.shape))
    assert np.max(np.abs(w - w[::-1, :])) == 0.0


def test_divisor_config_invariants():
    make = lambda **kw: geometry.DivisorConfig(**kw)
    base = dict(
        mode="anticanonical_smooth",
        points=(geometry.POLE_0, geometry.POLE_INF),
        lambdas=(0.5, 0.5),
        betas=(0.7, 0.7),
    )
    cfg = make(**base)
    assert cfg.mu == pytest.approx(0.7)
    assert cfg.is_two_pole()
    with pytest.raises(geometry.GeometryError):
        make(**{**base, "betas": (0.7, 1.0)})
    with pytest.raises(geometry.GeometryError):
        make(**{**base, "lambdas": (0.5, 0.6)})
    with pytest.raises(geometry.GeometryError):
        make(**{**base, "points": (geometry.POLE_0, geometry.POLE_0)})
    # mu must stay positive: three heavy points at small angle kill it
    with pytest.raises(geometry.GeometryError):
        make(
            mode="snc",
            points=((0.0, 0.0), (0.0, 2.0), (0.0, 4.0)),
            lambdas=(1.0, 1.0, 1.0),
            betas=(0.5, 0.5, 0.5),
        )


def test_divisor_config_grid_validation(grid_1d, grid_1d_free, grid_2d, two_pole):
    cfg = two_pole(0.7)
    cfg.validate_against_grid(grid_1d)
    with pytest.raises(geometry.GeometryError):
        cfg.validate_against_grid(grid_1d_free)
    off_axis = geometry.DivisorConfig(
        mode="snc", points=((0.0, 1.0),), lambdas=(0.5,), betas=(0.8,)
    )
    with pytest.raises(geometry.GeometryError):
        off_axis.validate_against_grid(grid_1d)  # needs Nphi > 1
    off_axis.validate_against_grid(grid_2d)
    with pytest.raises(geometry.GeometryError):
        geometry.DivisorConfig(
            mode="snc", points=("pole_0",), lambdas=(0.5,), betas=(0.8,)
        ).validate_against_grid(grid_2d)  # labels are uppercase sentinels


def test_two_pole_norm_product_closed_form(grid_1d, two_pole):
    # |S_0|^2 |S_inf|^2 = sech(s)^2 / 4 at the half weights
    prod = geometry.divisor_norm_squared_product(grid_1d, two_pole(0.7)).values
    expected = grid_1d.as_field_values(0.25 / np.cosh(grid_1d.s) ** 2)
    assert np.max(np.abs(prod - expected)) < 1e-14


def test_smoothed_divisor_form_mass(grid_2d):
    cfg = geometry.DivisorConfig(
        mode="snc", points=((0.0, 0.0),), lambdas=(0.5,), betas=(0.8,)
    )
    for eps in (1e-1, 1e-2, 1e-3):
        form = geometry.smoothed_divisor_form(grid_2d, cfg, 0, eps)
        assert form.mass() == pytest.approx(4.0 * math.pi * 0.5, abs=1e-6)
    with pytest.raises(geometry.GeometryError):
        geometry.smoothed_divisor_form(grid_2d, cfg, 0, 0.0)


def test_ricci_density_background_fixed_point(grid_1d):
    rho0 = geometry.fubini_study(grid_1d)
    out = geometry.ricci_density(rho0)
    assert np.max(np.abs(out.rho - rho0.rho)) == 0.0


def test_ricci_density_of_cone_pair_metric(grid_1d):
    # continuum identity ricci(rho_b) = b * rho_b holds in the interior;
    # the chart-end rows see the log-ratio's linear growth (rate 2 - 2b)
    # through the zero-slope closure, so they are excluded
    b = 0.8
    errs = []
    for ns in (256, 512):
        g = geometry.build_grid(12.0, ns, 1, "s1_z2_invariant")
        rho_b = geometry.MetricDensity(g, oracles.cone_pair_density(g.s, b))
        out = geometry.ricci_density(rho_b)
        interior = np.abs(g.s) <= g.L - 1.0
        errs.append(np.max(np.abs(out.rho - b * rho_b.rho)[interior]))
    assert errs[0] < 1e-3
    assert errs[0] / errs[1] > 3.5  # second-order in h


def test_poisson_free_constant_roundtrip(grid_2d, rng):
    u_true = oracles.random_cone_potential(grid_2d, rng)
    u_true = u_true - grid_2d.quad_flat(u_true) / grid_2d.quad_flat(np.ones(grid_2d.shape))
    source = 0.5 * grid_2d.flat_laplacian(u_true)
    u, kappa = geometry.solve_poisson_free_constant(grid_2d, source)
    assert abs(kappa) < 1e-10
    assert np.max(np.abs(u - u_true)) < 1e-8


def test_ricci_potential_round_background_is_zero(grid_1d):
    h = geometry.ricci_potential(geometry.fubini_study(grid_1d))
    assert np.max(np.abs(h.values)) < 1e-10


def test_ricci_potential_rejects_wrong_class(grid_1d):
    # density with the wrong total mass is outside the background class
    bad = geometry.MetricDensity(grid_1d, 2.0 * geometry.fubini_study(grid_1d).rho)
    with pytest.raises(geometry.GeometryError):
        geometry.ricci_potential(bad)


def test_metric_density_positivity_guard(grid_1d):
    with pytest.raises(geometry.GeometryError):
        geometry.MetricDensity(grid_1d, -np.ones(grid_1d.shape))
    geometry.MetricDensity(grid_1d, -np.ones(grid_1d.shape), require_positive=False)


def test_integrate_and_oscillation(grid_1d):
    rho0 = geometry.fubini_study(grid_1d)
    assert geometry.integrate(np.ones(grid_1d.shape), rho0) == pytest.approx(
        4.0 * math.pi, abs=1e-6
    )
    assert geometry.oscillation(np.tanh(grid_1d.s)[:, None]) == pytest.approx(
        2.0 * math.tanh(grid_1d.L), abs=1e-12
    )
