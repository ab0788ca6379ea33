import numpy as np
import pytest

from plastic_shell.fixtures import cylinder, icosphere, plane_grid, torus


@pytest.fixture(scope="session")
def plane():
    return plane_grid(6, 6)


@pytest.fixture(scope="session")
def sphere_small():
    return icosphere(1)


@pytest.fixture(scope="session")
def tube():
    return cylinder(12, 5)


@pytest.fixture(scope="session")
def donut():
    return torus(12, 8)


@pytest.fixture(scope="session")
def all_fixture_meshes(plane, sphere_small, tube, donut):
    return {"plane": plane, "sphere": sphere_small, "cylinder": tube,
            "torus": donut}


def rigid_motion(rng):
    """Random rotation (via QR) and translation."""
    Q, R = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q, rng.normal(size=3)
