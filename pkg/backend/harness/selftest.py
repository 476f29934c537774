"""Fast invariant checks over small grids; deterministic so two runs print the same summary."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from backend.ergodic_solvers import (
    HJB_TOL,
    optimal_stationary_drift,
    principal_eigen_oracle,
    solve_ergodic_hjb,
    solve_invariant_measure,
)
from backend.mfg_equilibrium import solve_mfg
from backend.social_planner import random_smooth_density, solve_planner
from backend.target_construction import expected_F_empirical
from backend.torus_core import (
    ConvolutionTerm,
    CouplingFunctional,
    GridDrift,
    LabError,
    LagrangianSpec,
    ProbabilityGrid,
    TorusGrid,
    empirical_measure,
    project_to_torus,
    wasserstein1_circle,
)

logger = logging.getLogger(__name__)

CORRUPTIONS = ("solver-tolerance",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name} value={self.value:.3e} tol={self.tolerance:.1e} {self.detail}".rstrip()


@dataclass(frozen=True)
class SelftestReport:
    checks: Tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines) + "\n"


def _cos_lagrangian(n: int, amplitude: float = 1.0) -> LagrangianSpec:
    grid = TorusGrid(n)
    return LagrangianSpec.normalized(grid.field(lambda x: amplitude * np.cos(2 * np.pi * x)))


def _conv_coupling(grid: TorusGrid) -> CouplingFunctional:
    return CouplingFunctional.build(grid, [ConvolutionTerm.from_function(grid, lambda x: np.cos(2 * np.pi * x), 0.5)])


def check_projection(hjb_tol: float) -> Tuple[float, float]:
    got = project_to_torus(np.array([1.25, -0.25, 0.0, 1.0, -1e-20]))
    return float(np.max(np.abs(got - np.array([0.25, 0.75, 0.0, 0.0, 0.0])))), 1e-15


def check_w1_examples(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    a = ProbabilityGrid.point_mass(grid, 0)
    errors = [
        abs(wasserstein1_circle(a, a)),
        abs(wasserstein1_circle(a, ProbabilityGrid.point_mass(grid, 32)) - 0.5),
        abs(wasserstein1_circle(a, ProbabilityGrid.point_mass(grid, 63)) - grid.h),
    ]
    return max(errors), 1e-12


def check_empirical_single(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    m = empirical_measure([0.3], grid)
    expected = ProbabilityGrid.point_mass(grid, int(grid.cell_index(0.3)))
    return float(np.max(np.abs(m.masses - expected.masses))), 1e-15


def check_flat_hjb(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    sol = solve_ergodic_hjb(LagrangianSpec(grid.constant(0.0)), tol=hjb_tol)
    return max(abs(sol.lam), float(np.max(np.abs(sol.u.values)))), 1e-10


def check_hjb_eigen_agreement(hjb_tol: float) -> Tuple[float, float]:
    lagrangian = _cos_lagrangian(128)
    sol = solve_ergodic_hjb(lagrangian, tol=hjb_tol)
    lam, _ = principal_eigen_oracle(lagrangian)
    return abs(sol.lam - lam), 1e-8


def check_gibbs_identity(hjb_tol: float) -> Tuple[float, float]:
    lagrangian = _cos_lagrangian(128)
    sol = solve_ergodic_hjb(lagrangian, tol=hjb_tol)
    mu = solve_invariant_measure(GridDrift.from_potential(sol.u)).mu
    gibbs = ProbabilityGrid.from_weights(lagrangian.grid, np.exp(-2.0 * (sol.u.values - sol.u.values.min())))
    return float(np.sum(np.abs(mu.masses - gibbs.masses))), 1e-8


def check_constant_drift_uniform(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    mu = solve_invariant_measure(GridDrift.from_faces(grid, np.full(grid.n_cells, 0.7))).mu
    return float(np.max(np.abs(mu.density - 1.0))), 1e-8


def check_optimal_drift_uniform(hjb_tol: float) -> Tuple[float, float]:
    lagrangian = _cos_lagrangian(64)
    drift, cost = optimal_stationary_drift(ProbabilityGrid.uniform(lagrangian.grid), lagrangian)
    return max(drift.sup_norm, abs(cost - float(np.mean(lagrangian.V)))), 1e-12


def check_cost_lower_bound(hjb_tol: float) -> Tuple[float, float]:
    lagrangian = _cos_lagrangian(64)
    lam = solve_ergodic_hjb(lagrangian, tol=hjb_tol).lam
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(8):
        _, cost = optimal_stationary_drift(random_smooth_density(lagrangian.grid, rng), lagrangian)
        worst = max(worst, -lam - cost)
    return worst, 1e-9


def check_max_F_examples(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    constant = CouplingFunctional.constant(grid, 0.3).maximum()
    g = grid.field(lambda x: np.cos(2 * np.pi * x))
    linear = CouplingFunctional.linear(g).maximum()
    errors = [abs(constant.value - 0.3), 0.0 if constant.certified else 1.0,
              abs(linear.value - float(np.ptp(g.values))),
              0.0 if linear.method == "point-mass" else 1.0]
    return max(errors), 1e-12


def check_linear_expected_empirical(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    coupling = CouplingFunctional.linear(grid.field(lambda x: np.sin(2 * np.pi * x)))
    m = random_smooth_density(grid, np.random.default_rng(1))
    mean, _ = expected_F_empirical(coupling, m, 7)
    return abs(mean - coupling.value(m)), 1e-13


def check_flat_mfg(hjb_tol: float) -> Tuple[float, float]:
    grid = TorusGrid(64)
    eq = solve_mfg(LagrangianSpec(grid.constant(0.0)), _conv_coupling(grid))
    return max(abs(eq.lambda0), float(np.max(np.abs(eq.mu0.density - 1.0)))), 1e-10


def check_planner_constant_F(hjb_tol: float) -> Tuple[float, float]:
    lagrangian = _cos_lagrangian(32, 0.5)
    coupling = CouplingFunctional.constant(lagrangian.grid, 0.25)
    lam = solve_ergodic_hjb(lagrangian, tol=hjb_tol).lam
    planner = solve_planner(lagrangian, coupling)
    return abs(planner.e_min - (-lam + 0.25)), 1e-8


CHECKS: Dict[str, Callable[[float], Tuple[float, float]]] = {
    "torus-projection": check_projection,
    "w1-examples": check_w1_examples,
    "empirical-single-point": check_empirical_single,
    "flat-hjb": check_flat_hjb,
    "hjb-eigen-agreement": check_hjb_eigen_agreement,
    "gibbs-identity": check_gibbs_identity,
    "constant-drift-uniform": check_constant_drift_uniform,
    "optimal-drift-uniform": check_optimal_drift_uniform,
    "cost-lower-bound": check_cost_lower_bound,
    "max-F-examples": check_max_F_examples,
    "linear-expected-empirical": check_linear_expected_empirical,
    "flat-mfg": check_flat_mfg,
    "planner-constant-F": check_planner_constant_F,
}


def selftest(corrupt: Optional[str] = None) -> SelftestReport:
    """Run every check; ``corrupt='solver-tolerance'`` loosens the HJB tolerance on purpose."""
    if corrupt is not None and corrupt not in CORRUPTIONS:
        raise ValueError(f"unknown corruption '{corrupt}', expected one of {CORRUPTIONS}")
    hjb_tol = 10.0 if corrupt == "solver-tolerance" else HJB_TOL
    results = []
    for name, check in CHECKS.items():
        try:
            value, tolerance = check(hjb_tol)
            passed = bool(np.isfinite(value) and value <= tolerance)
            results.append(CheckResult(name, float(value), tolerance, passed))
        except LabError as exc:
            results.append(CheckResult(name, float("nan"), 0.0, False, f"{type(exc).__name__}: {exc}"))
        if not results[-1].passed:
            logger.error(f"selftest: invariant '{name}' failed")
    report = SelftestReport(tuple(results))
    logger.info(f"selftest: {sum(c.passed for c in results)}/{len(results)} checks passed")
    return report
