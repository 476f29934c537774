import numpy as np
import pytest

from backend.ergodic_solvers import (
    HJB_MAX_ITER,
    closed_measure_min_oracle,
    eigen_potential,
    fokker_planck_matrix,
    fokker_planck_residual,
    hjb_residual,
    kinetic_energy,
    optimal_stationary_drift,
    principal_eigen_oracle,
    solve_ergodic_hjb,
    solve_invariant_measure,
    stationary_cost,
    stationary_drift_for_flux,
    stationary_flux,
)
from backend.social_planner import random_smooth_density
from backend.torus_core import A_MAX, GridDrift, GridField, LagrangianSpec, ProbabilityGrid, TorusGrid
from tests.conftest import half_cos_lagrangian


def cos_lagrangian(n_cells):
    grid = TorusGrid(n_cells)
    return LagrangianSpec.normalized(grid.field(lambda x: np.cos(2 * np.pi * x)))


def test_flat_potential_has_zero_constant():
    grid = TorusGrid(64)
    sol = solve_ergodic_hjb(LagrangianSpec(grid.constant(0.0)))
    assert sol.lam == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(sol.u.values)) <= 1e-12


def test_constant_shift_moves_lambda():
    lag = cos_lagrangian(64)
    base = solve_ergodic_hjb(lag)
    shifted = solve_ergodic_hjb(lag.shifted(0.3))
    assert shifted.lam == pytest.approx(base.lam - 0.3, abs=1e-10)
    assert np.max(np.abs(shifted.u.values - base.u.values)) <= 1e-8


def test_hjb_agrees_with_eigen_oracle():
    lag = cos_lagrangian(128)
    sol = solve_ergodic_hjb(lag)
    lam, w = principal_eigen_oracle(lag)
    assert sol.lam == pytest.approx(lam, abs=1e-8)
    assert np.max(np.abs(sol.u.values - eigen_potential(w).values)) <= 1e-7
    assert sol.residual <= 1e-10
    assert np.sum(sol.u.values) * lag.grid.h == pytest.approx(0.0, abs=1e-12)


def test_hjb_residual_is_small_at_solution():
    lag = half_cos_lagrangian(64)
    f = lag.grid.field(lambda x: 0.2 * np.sin(2 * np.pi * x))
    sol = solve_ergodic_hjb(lag, f)
    assert np.max(np.abs(hjb_residual(lag, f, sol.u, sol.lam))) <= 1e-10


def test_strong_potential_still_converges():
    grid = TorusGrid(64)
    lag = LagrangianSpec.normalized(grid.field(lambda x: 40.0 * np.cos(2 * np.pi * x)))
    sol = solve_ergodic_hjb(lag)
    lam, _ = principal_eigen_oracle(lag)
    assert sol.lam == pytest.approx(lam, abs=1e-8)


def test_fokker_planck_columns_sum_to_zero(rng):
    grid = TorusGrid(32)
    drift = GridDrift.from_faces(grid, rng.normal(size=32))
    M = fokker_planck_matrix(drift)
    assert np.max(np.abs(np.asarray(M.sum(axis=0)).ravel())) <= 1e-9


def test_constant_drift_keeps_uniform():
    grid = TorusGrid(64)
    mu = solve_invariant_measure(GridDrift.from_faces(grid, np.full(64, 0.7))).mu
    assert np.max(np.abs(mu.density - 1.0)) <= 1e-8
    flux = stationary_flux(GridDrift.from_faces(grid, np.full(64, 0.7)), mu)
    assert np.ptp(flux) <= 1e-9
    assert flux[0] > 0.0


def test_gibbs_identity():
    lag = cos_lagrangian(128)
    sol = solve_ergodic_hjb(lag)
    mu = solve_invariant_measure(GridDrift.from_potential(sol.u)).mu
    gibbs = ProbabilityGrid.from_weights(lag.grid, np.exp(-2.0 * sol.u.values))
    assert np.sum(np.abs(mu.masses - gibbs.masses)) <= 1e-8
    assert np.max(np.abs(stationary_flux(GridDrift.from_potential(sol.u), mu))) <= 1e-8


def test_invariant_measure_positive_and_normalized(rng):
    grid = TorusGrid(48)
    drift = GridDrift.from_faces(grid, 2.0 * rng.normal(size=48))
    result = solve_invariant_measure(drift)
    assert np.min(result.mu.density) > 0.0
    assert np.sum(result.mu.masses) == pytest.approx(1.0, abs=1e-12)
    assert fokker_planck_residual(drift, result.mu) <= 1e-9 * np.max(np.abs(fokker_planck_matrix(drift).diagonal()))


def test_optimal_drift_of_uniform_is_zero():
    lag = cos_lagrangian(64)
    drift, cost = optimal_stationary_drift(ProbabilityGrid.uniform(lag.grid), lag)
    assert drift.sup_norm == 0.0
    assert cost == pytest.approx(np.mean(lag.V), abs=1e-14)


def test_optimal_drift_keeps_measure_stationary(rng):
    grid = TorusGrid(64)
    m = random_smooth_density(grid, rng)
    drift, _ = optimal_stationary_drift(m, LagrangianSpec(grid.constant(0.0)))
    mu = solve_invariant_measure(drift).mu
    assert np.sum(np.abs(mu.masses - m.masses)) <= 1e-8


def test_cost_bounded_below_by_minus_lambda(rng):
    lag = half_cos_lagrangian(64)
    lam = solve_ergodic_hjb(lag).lam
    for _ in range(10):
        _, cost = optimal_stationary_drift(random_smooth_density(lag.grid, rng, amplitude=2.0), lag)
        assert cost >= -lam - 1e-10


def test_cost_equals_minus_lambda_at_gibbs():
    lag = half_cos_lagrangian(64)
    sol = solve_ergodic_hjb(lag)
    alpha = GridDrift.from_potential(sol.u)
    mu = solve_invariant_measure(alpha).mu
    assert stationary_cost(alpha, mu, lag) == pytest.approx(-sol.lam, abs=1e-9)


def test_zero_flux_drift_is_cheapest(rng):
    lag = half_cos_lagrangian(32)
    m = random_smooth_density(lag.grid, rng)
    best, best_cost = optimal_stationary_drift(m, lag)
    zero = stationary_drift_for_flux(m, 0.0)
    assert np.max(np.abs(zero.faces - best.faces)) <= 1e-9
    for J in (-0.3, 0.2):
        drift = stationary_drift_for_flux(m, J)
        assert np.max(np.abs(stationary_flux(drift, m) - J)) <= 1e-9
        assert stationary_cost(drift, m, lag) > best_cost
        assert kinetic_energy(drift, m) > 0.0


def test_mdp_oracle_matches_minus_lambda():
    lag = half_cos_lagrangian(64)
    lam = solve_ergodic_hjb(lag).lam
    result = closed_measure_min_oracle(lag, np.linspace(-4.0, 4.0, 161))
    assert result.converged
    assert result.value == pytest.approx(-lam, abs=0.02)


def random_potential(grid, rng, modes=3):
    coeffs = rng.normal(scale=0.5, size=(modes, 2))
    values = sum(a * np.cos(2 * np.pi * (k + 1) * grid.nodes) + b * np.sin(2 * np.pi * (k + 1) * grid.nodes)
                 for k, (a, b) in enumerate(coeffs))
    return LagrangianSpec.normalized(GridField(grid, values))


def test_newton_reports_steps_taken():
    flat = solve_ergodic_hjb(LagrangianSpec(TorusGrid(64).constant(0.0)))
    assert flat.iterations == 0 and flat.method == "newton"
    sol = solve_ergodic_hjb(cos_lagrangian(64))
    assert sol.method == "newton"
    assert 0 < sol.iterations < HJB_MAX_ITER


def test_lambda_converges_at_second_order():
    lams = [principal_eigen_oracle(cos_lagrangian(n))[0] for n in (16, 32, 64, 128)]
    gaps = np.abs(np.diff(lams))
    ratios = gaps[:-1] / gaps[1:]
    assert np.all((ratios > 3.0) & (ratios < 5.0))


@pytest.mark.parametrize("x", [0.1, 0.37, 0.5, 0.9])
def test_hamiltonian_is_the_legendre_transform(x):
    lag = half_cos_lagrangian(64)
    actions = np.linspace(-A_MAX, A_MAX, 16001)
    for p in (-3.0, -0.4, 0.0, 1.2, 5.0):
        values = -actions * p - lag.lagrangian(actions, x)
        best = int(np.argmax(values))
        assert actions[best] == pytest.approx(-p, abs=1e-3)
        assert values[best] == pytest.approx(float(lag.hamiltonian(p, x)), abs=1e-6)


@pytest.mark.slow
def test_duality_sandwich_over_random_potentials(rng):
    grid = TorusGrid(32)
    actions = np.linspace(-4.0, 4.0, 81)
    for _ in range(20):
        lag = random_potential(grid, rng)
        lam = solve_ergodic_hjb(lag).lam
        _, cost = optimal_stationary_drift(random_smooth_density(grid, rng), lag)
        assert cost >= -lam - 1e-10
        assert closed_measure_min_oracle(lag, actions).value >= -lam - 0.05


@pytest.mark.slow
def test_mdp_oracle_improves_with_finer_actions():
    lag = half_cos_lagrangian(128)
    lam = solve_ergodic_hjb(lag).lam
    values = [closed_measure_min_oracle(lag, np.linspace(-4.0, 4.0, k)).value for k in (41, 81, 161)]
    assert abs(values[0] + lam) <= 0.02
    assert values[0] >= values[1] - 1e-9 >= values[2] - 2e-9
