import numpy as np
import pytest

from sgot import ConvexPolytope, PhiPolytope, PhysicalConstants, SeedEnsemble


@pytest.fixture
def constants():
    """gamma = 2, kappa = 1/2: polynomial integrands, exact quadrature."""
    return PhysicalConstants(f_cor=1.0, g=1.0, gamma=2.0, kappa=0.5, delta=0.05)


@pytest.fixture
def constants_general():
    """Generic parameters away from the closed-form corner."""
    return PhysicalConstants(f_cor=1.3, g=0.8, gamma=1.4, kappa=0.7, delta=0.05)


@pytest.fixture
def phi_cube(constants):
    """Unit cube fluid domain in Phi coordinates."""
    return PhiPolytope(ConvexPolytope.box([0, 0, 0], [1, 1, 1]))


def well_prepared_ensemble(rng, n, uniform_masses=False, z3_range=(1.2, 3.0)):
    z = np.column_stack(
        [
            rng.uniform(-0.3, 0.35, n),
            rng.uniform(-0.3, 0.35, n),
            np.linspace(*z3_range, n) + rng.uniform(0, 0.02, n),
        ]
    )
    if uniform_masses:
        m = np.full(n, 1.0 / n)
    else:
        m = rng.uniform(0.5, 1.5, n)
        m = m / m.sum()
    return SeedEnsemble(z, m)
