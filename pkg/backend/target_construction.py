"""Target stationary pairs, the trigger tolerance delta and the N-player payoff e^N."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from backend.ergodic_solvers import optimal_stationary_drift, solve_invariant_measure, stationary_cost
from backend.social_planner import PenalizedSolution, PlannerSolution, random_smooth_density
from backend.torus_core import (
    BracketError,
    CouplingFunctional,
    GridDrift,
    GridField,
    LabError,
    LagrangianSpec,
    ProbabilityGrid,
    wasserstein1_circle,
)

logger = logging.getLogger(__name__)

BISECTION_TOL = 1e-5
BISECTION_MAX_ITER = 60
DELTA_CAP = 0.1
DELTA_FLOOR = 1e-4


class CalibrationError(LabError):
    pass


@dataclass(frozen=True)
class HomotopyPoint:
    lam: float
    phi: GridField
    m: ProbabilityGrid
    alpha: GridDrift
    cost: float
    F_value: float

    @property
    def value(self) -> float:
        return self.cost + self.F_value


@dataclass(frozen=True)
class TargetPair:
    e: float
    lambda_star: float
    m_hat: ProbabilityGrid
    alpha_hat: GridDrift
    phi: GridField
    value: float
    cost: float
    F_value: float
    iterations: int

    def to_json_dict(self) -> dict:
        return {
            "e": self.e,
            "lambda_star": self.lambda_star,
            "value": self.value,
            "cost": self.cost,
            "F_value": self.F_value,
            "iterations": self.iterations,
            "m_hat": self.m_hat.to_json_dict(),
            "phi": self.phi.to_json_dict(),
        }


def homotopy_point(lam: float, planner: PlannerSolution, penalized: PenalizedSolution,
                   lagrangian: LagrangianSpec, coupling: CouplingFunctional) -> HomotopyPoint:
    """phi = (1 - lam) u~ + lam u^n, alpha = -D phi, m its invariant measure."""
    phi = GridField(planner.u_tilde.grid, (1.0 - lam) * planner.u_tilde.values + lam * penalized.u_n.values)
    alpha = GridDrift.from_potential(phi)
    m = solve_invariant_measure(alpha).mu
    return HomotopyPoint(float(lam), phi, m, alpha, stationary_cost(alpha, m, lagrangian), coupling.value(m))


def value_profile(lambdas: Sequence[float], planner: PlannerSolution, penalized: PenalizedSolution,
                  lagrangian: LagrangianSpec, coupling: CouplingFunctional, n_jobs: int = 1) -> pd.DataFrame:
    points = Parallel(n_jobs=n_jobs)(
        delayed(homotopy_point)(lam, planner, penalized, lagrangian, coupling) for lam in lambdas
    )
    return pd.DataFrame({
        "lambda": [p.lam for p in points],
        "value": [p.value for p in points],
        "cost": [p.cost for p in points],
        "F_value": [p.F_value for p in points],
    })


def build_target(e: float, lagrangian: LagrangianSpec, coupling: CouplingFunctional, planner: PlannerSolution,
                 penalized: PenalizedSolution, tol: float = BISECTION_TOL,
                 max_iter: int = BISECTION_MAX_ITER) -> TargetPair:
    """Bisection on lambda for value(lambda) = e along the homotopy."""
    lo = homotopy_point(0.0, planner, penalized, lagrangian, coupling)
    if e <= lo.value + tol:
        if e < planner.e_min - tol:
            raise BracketError(f"target {e:.8f} below e_min {planner.e_min:.8f}")
        return _pair(e, lo, 0)
    hi = homotopy_point(1.0, planner, penalized, lagrangian, coupling)
    if hi.value <= e:
        raise BracketError(f"value(1)={hi.value:.8f} does not exceed e={e:.8f}; increase n")

    a, b = 0.0, 1.0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (a + b)
        point = homotopy_point(mid, planner, penalized, lagrangian, coupling)
        if abs(point.value - e) <= tol:
            logger.info(f"target e={e:.6f}: lambda*={mid:.8f} after {it} bisections")
            return _pair(e, point, it)
        if point.value < e:
            a = mid
        else:
            b = mid
    raise BracketError(f"bisection did not reach |value - e| <= {tol} in {max_iter} iterations")


def _pair(e: float, point: HomotopyPoint, iterations: int) -> TargetPair:
    return TargetPair(e, point.lam, point.m, point.alpha, point.phi, point.value, point.cost,
                      point.F_value, iterations)


@dataclass(frozen=True)
class DeltaCalibration:
    delta: float
    epsilon: float
    n_samples: int
    n_holdout: int
    holdout_checked: int
    holdout_violations: int
    heuristic: bool = True

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def _perturbation_cost(target: TargetPair, lagrangian: LagrangianSpec, s: float,
                       q: ProbabilityGrid) -> tuple:
    m_prime = target.m_hat.mix(q, s)
    _, cost = optimal_stationary_drift(m_prime, lagrangian)
    return wasserstein1_circle(m_prime, target.m_hat), cost


def _sample_perturbations(target: TargetPair, lagrangian: LagrangianSpec, count: int, s_max: float,
                          rng: np.random.Generator, n_jobs: int) -> np.ndarray:
    grid = target.m_hat.grid
    jobs = []
    for k in range(count):
        s = s_max * (1.0 - rng.random())
        if k % 2 == 0:
            q = random_smooth_density(grid, rng, amplitude=2.0)
        else:
            q = ProbabilityGrid.point_mass(grid, int(rng.integers(grid.n_cells)))
        jobs.append((s, q))
    rows = Parallel(n_jobs=n_jobs)(delayed(_perturbation_cost)(target, lagrangian, s, q) for s, q in jobs)
    return np.array(rows, dtype=float).reshape(-1, 2)


def calibrate_delta(epsilon: float, target: TargetPair, lagrangian: LagrangianSpec, n_samples: int = 200,
                    n_holdout: int = 50, s_max: float = 0.5, seed: int = 0, cap: float = DELTA_CAP,
                    floor: float = DELTA_FLOOR, n_jobs: int = 1) -> DeltaCalibration:
    """Largest dyadic delta <= cap with c(m') >= c(m^) - epsilon/3 on sampled perturbations."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = np.random.default_rng(seed)
    _, base = optimal_stationary_drift(target.m_hat, lagrangian)
    threshold = base - epsilon / 3.0
    samples = _sample_perturbations(target, lagrangian, n_samples, s_max, rng, n_jobs)

    delta = cap
    while delta >= floor:
        close = samples[:, 0] <= delta
        if np.all(samples[close, 1] >= threshold):
            break
        delta *= 0.5
    else:
        raise CalibrationError(f"no admissible delta above {floor} for epsilon={epsilon}")

    holdout = _sample_perturbations(target, lagrangian, n_holdout, s_max, rng, n_jobs)
    close = holdout[:, 0] <= delta
    violations = int(np.sum(holdout[close, 1] < threshold))
    if violations:
        logger.warning(f"delta={delta:g}: {violations} holdout perturbations violate the epsilon/3 bound")
    logger.info(f"calibrated delta={delta:g} for epsilon={epsilon:g} ({int(np.sum(close))} holdout checks)")
    return DeltaCalibration(float(delta), float(epsilon), n_samples, n_holdout, int(np.sum(close)), violations)


@dataclass(frozen=True)
class PayoffTarget:
    N: int
    e_N: float
    cost: float
    expected_F: float
    stderr: float
    method: str


def expected_F_empirical(coupling: CouplingFunctional, m: ProbabilityGrid, M: int, method: str = "closed-form",
                         n_draws: int = 10_000, seed: int = 0) -> tuple:
    """E F(empirical measure of M iid draws from m) with its standard error."""
    if method == "closed-form":
        return coupling.expected_empirical(m, M), 0.0
    if method != "monte-carlo":
        raise ValueError(f"unknown method '{method}'")
    rng = np.random.default_rng(seed)
    grid = m.grid
    cells = rng.choice(grid.n_cells, size=(n_draws, M), p=m.masses)
    counts = np.zeros((n_draws, grid.n_cells))
    np.add.at(counts, (np.repeat(np.arange(n_draws), M), cells.ravel()), 1.0)
    values = coupling.value_batch(counts / M)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n_draws))


def compute_eN(N: int, target: TargetPair, coupling: CouplingFunctional, method: str = "closed-form",
               n_draws: int = 10_000, seed: int = 0) -> PayoffTarget:
    """Stationary cost of the target pair plus E F(empirical of the N-1 others)."""
    if N < 2:
        raise ValueError(f"N must be at least 2, got {N}")
    mean, stderr = expected_F_empirical(coupling, target.m_hat, N - 1, method, n_draws, seed)
    return PayoffTarget(int(N), target.cost + mean, target.cost, mean, stderr, method)
