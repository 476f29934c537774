import numpy as np
import pytest

from backend.ergodic_solvers import solve_ergodic_hjb
from backend.mfg_equilibrium import mfg_residuals, solve_mfg, uniqueness_check
from backend.torus_core import CouplingFunctional, LagrangianSpec, TorusGrid, wasserstein1_circle
from tests.conftest import cos_convolution


def test_equilibrium_residuals(equilibrium, lagrangian, coupling):
    r_hjb, r_fp = mfg_residuals(lagrangian, coupling, equilibrium.lambda0 - equilibrium.F_mu0,
                                equilibrium.u0, equilibrium.mu0)
    assert r_hjb <= 1e-8
    assert r_fp <= 1e-8 * lagrangian.grid.n_cells ** 2


def test_payoffs(equilibrium, lagrangian):
    lam = solve_ergodic_hjb(lagrangian).lam
    assert equilibrium.lambda0 == pytest.approx(lam)
    assert equilibrium.e_mfg == pytest.approx(-lam + equilibrium.F_mu0)
    # attractive cosine kernel peaks at a point mass
    assert equilibrium.e_max == pytest.approx(-lam + 0.5)
    assert equilibrium.maximum.certified
    assert equilibrium.e_mfg < equilibrium.e_max


def test_flat_potential_gives_uniform_equilibrium():
    grid = TorusGrid(64)
    eq = solve_mfg(LagrangianSpec(grid.constant(0.0)), cos_convolution(grid))
    assert eq.lambda0 == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(eq.mu0.density - 1.0)) <= 1e-8
    assert eq.F_mu0 == pytest.approx(0.0, abs=1e-12)


def test_constant_coupling_shifts_payoff(lagrangian, equilibrium):
    eq = solve_mfg(lagrangian, CouplingFunctional.constant(lagrangian.grid, 0.4))
    assert eq.e_mfg == pytest.approx(-equilibrium.lambda0 + 0.4)
    assert eq.e_max == pytest.approx(eq.e_mfg)
    assert wasserstein1_circle(eq.mu0, equilibrium.mu0) <= 1e-12


def test_summary_keys(equilibrium):
    summary = equilibrium.summary()
    assert {"lambda0", "e_mfg", "e_max", "max_F", "max_F_certified"} <= set(summary)


def test_uniqueness_check(lagrangian, coupling, equilibrium):
    report = uniqueness_check(lagrangian, coupling, n_starts=4, seed=2)
    assert report.unique
    assert all(wasserstein1_circle(m, equilibrium.mu0) <= 1e-8 for m in report.measures)
