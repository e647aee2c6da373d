import numpy as np
import pytest

from conical_ke import geometry


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


@pytest.fixture(scope="session")
def grid_1d():
    return geometry.build_grid(12.0, 256, 1, "s1_z2_invariant")


@pytest.fixture(scope="session")
def grid_1d_free():
    """s1-invariant without the z2 projection; for asymmetric profiles."""
    return geometry.build_grid(12.0, 256, 1, "s1_invariant")


@pytest.fixture(scope="session")
def grid_2d():
    return geometry.build_grid(12.0, 64, 32, "full_2d")


@pytest.fixture
def two_pole():
    def make(beta, lambdas=(0.5, 0.5)):
        return geometry.DivisorConfig(
            mode="anticanonical_smooth",
            points=(geometry.POLE_0, geometry.POLE_INF),
            lambdas=lambdas,
            betas=(beta, beta),
        )

    return make


@pytest.fixture
def snc_triple():
    def make(betas=(0.8, 0.8, 0.8), lambdas=(0.5, 0.5, 0.5)):
        third = 2.0 * np.pi / 3.0
        return geometry.DivisorConfig(
            mode="snc",
            points=((0.0, 0.0), (0.0, third), (0.0, 2.0 * third)),
            lambdas=lambdas,
            betas=tuple(betas),
        )

    return make
