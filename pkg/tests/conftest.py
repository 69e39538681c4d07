import numpy as np
import pytest

from modesched.model import QuadraticCost, SwitchedLinearSystem, SwitchingControl, uniform_grid
from modesched.scenarios import cart_mass, spring_mass
from modesched.transition import build_tables


@pytest.fixture(scope="session")
def spring():
    sc = spring_mass()
    return sc.system, sc.cost, sc


@pytest.fixture(scope="session")
def spring_tables(spring):
    system, cost, _ = spring
    return build_tables(system, cost, 0.0, 2.0)


@pytest.fixture(scope="session")
def spring_u0():
    grid = uniform_grid(0.0, 2.0, 1e-3)
    return SwitchingControl.constant(grid, 2, 2)


@pytest.fixture(scope="session")
def cart():
    sc = cart_mass()
    return sc.system, sc.cost, sc


@pytest.fixture(scope="session")
def cart_tables_short(cart):
    system, cost, _ = cart
    return build_tables(system, cost, 0.0, 3.0, spacing=5e-3, fine_step=1e-4)


@pytest.fixture(scope="session")
def toy_system():
    """Two constant 2x2 modes with mild dynamics, handy for quick checks."""
    return SwitchedLinearSystem.from_entries(
        modes=[[[0.0, 1.0], [-4.0, -0.4]], [[0.0, 1.0], [-9.0, -1.0]]],
        x0=[1.0, 0.0],
    )


@pytest.fixture(scope="session")
def toy_cost():
    return QuadraticCost.from_entries(
        Q=[[1.0, 0.0], [0.0, 0.2]], P1=np.diag([0.5, 0.1]), t0=0.0, tM=1.5)
