import numpy as np
import pytest

from backend.mfg_equilibrium import solve_mfg
from backend.social_planner import solve_penalized, solve_planner
from backend.target_construction import build_target
from backend.torus_core import ConvolutionTerm, CouplingFunctional, LagrangianSpec, TorusGrid


def half_cos_lagrangian(n_cells: int) -> LagrangianSpec:
    grid = TorusGrid(n_cells)
    return LagrangianSpec.normalized(grid.field(lambda x: 0.5 * np.cos(2 * np.pi * x)))


def cos_convolution(grid: TorusGrid, weight: float = 0.5) -> CouplingFunctional:
    return CouplingFunctional.build(grid, [ConvolutionTerm.from_function(grid, lambda x: np.cos(2 * np.pi * x), weight)])


@pytest.fixture(scope="session")
def lagrangian():
    return half_cos_lagrangian(64)


@pytest.fixture(scope="session")
def grid(lagrangian):
    return lagrangian.grid


@pytest.fixture(scope="session")
def coupling(grid):
    return cos_convolution(grid)


@pytest.fixture(scope="session")
def equilibrium(lagrangian, coupling):
    return solve_mfg(lagrangian, coupling)


@pytest.fixture(scope="session")
def planner(lagrangian, coupling, equilibrium):
    return solve_planner(lagrangian, coupling, equilibrium)


@pytest.fixture(scope="session")
def penalized(lagrangian, coupling, equilibrium, planner):
    return solve_penalized(8.0, lagrangian, coupling, equilibrium, warm_start=planner.m_tilde)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def target(lagrangian, coupling, planner, penalized):
    return build_target(0.5 * (planner.e_min + penalized.value), lagrangian, coupling, planner, penalized)
