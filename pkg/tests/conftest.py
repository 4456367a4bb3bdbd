import numpy as np
import pytest

from windshape import equilibrium as eq
from windshape import loopshape as ls
from windshape.model import TurbineParams
from windshape.sim import DEFAULT_DT

DESIGN_WIND = {2: 7.5, 3: 11.0}
DESIGN_POWER = 3.0e6


@pytest.fixture(scope="session")
def params():
    return TurbineParams()


@pytest.fixture(scope="session")
def design_points(params):
    return {2: eq.equilibrium_region2(params, DESIGN_WIND[2]),
            3: eq.equilibrium_region3(params, DESIGN_WIND[3], DESIGN_POWER)}


@pytest.fixture(scope="session")
def designs(params, design_points):
    return {r: ls.design_region(params, op, ls.default_weights(r), dt=DEFAULT_DT)
            for r, op in design_points.items()}


@pytest.fixture(scope="session")
def discrete_controllers(designs):
    return {r: d.result.K_discrete for r, d in designs.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_stable(rng, n, m, p, margin=0.1):
    """Random continuous-time realization with spectral abscissa below ``-margin``."""
    from windshape.linearize import StateSpaceModel
    A = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(A).real) + margin + rng.uniform(0, 1)
    A = A - shift * np.eye(n)
    return StateSpaceModel(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)),
                           rng.standard_normal((p, m)))
