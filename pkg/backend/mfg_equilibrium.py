import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from joblib import Parallel, delayed

from backend.ergodic_solvers import (
    ErgodicSolution,
    fokker_planck_residual,
    hjb_residual,
    solve_ergodic_hjb,
    solve_invariant_measure,
)
from backend.torus_core import (
    CouplingFunctional,
    FunctionalMaximum,
    GridDrift,
    GridField,
    InvariantViolation,
    LagrangianSpec,
    ProbabilityGrid,
    wasserstein1_circle,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class MfgEquilibrium:
    lambda0: float
    u0: GridField
    mu0: ProbabilityGrid
    e_mfg: float
    e_max: float
    F_mu0: float
    maximum: FunctionalMaximum
    hjb_residual: float
    fp_residual: float

    @property
    def alpha0(self) -> GridDrift:
        return GridDrift.from_potential(self.u0)

    def summary(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "e_mfg": self.e_mfg,
            "e_max": self.e_max,
            "F_mu0": self.F_mu0,
            "max_F": self.maximum.value,
            "max_F_certified": self.maximum.certified,
            "max_F_method": self.maximum.method,
            "hjb_residual": self.hjb_residual,
            "fp_residual": self.fp_residual,
        }


def mfg_residuals(lagrangian: LagrangianSpec, coupling: CouplingFunctional, lam: float, u: GridField,
                  mu: ProbabilityGrid) -> tuple:
    """Sup-norm residuals of the ergodic MFG system with the coupling frozen at F(mu)."""
    frozen = u.grid.constant(coupling.value(mu))
    r_hjb = float(np.max(np.abs(hjb_residual(lagrangian, frozen, u, lam))))
    r_fp = fokker_planck_residual(GridDrift.from_potential(u), mu)
    return r_hjb, r_fp


def solve_mfg(lagrangian: LagrangianSpec, coupling: CouplingFunctional, tol: float = RESIDUAL_TOL,
              n_jobs: int = 1) -> MfgEquilibrium:
    """The unique ergodic MFG equilibrium: F(mu) is constant in x, so the system decouples."""
    ergodic: ErgodicSolution = solve_ergodic_hjb(lagrangian)
    stationary = solve_invariant_measure(GridDrift.from_potential(ergodic.u))
    mu0 = stationary.mu
    F_mu0 = coupling.value(mu0)
    maximum = coupling.maximum(n_jobs=n_jobs)

    r_hjb, r_fp = mfg_residuals(lagrangian, coupling, ergodic.lam - F_mu0, ergodic.u, mu0)
    if r_hjb > tol:
        raise InvariantViolation("mfg-hjb-residual", r_hjb, tol)
    # FP rows scale like 1/h^2
    fp_tol = tol * lagrangian.grid.n_cells ** 2
    if r_fp > fp_tol:
        raise InvariantViolation("mfg-fp-residual", r_fp, fp_tol)

    e_mfg = -ergodic.lam + F_mu0
    e_max = -ergodic.lam + maximum.value
    logger.info(f"MFG equilibrium: lambda0={ergodic.lam:.10f} e_mfg={e_mfg:.10f} e_max={e_max:.10f}")
    return MfgEquilibrium(ergodic.lam, ergodic.u, mu0, e_mfg, e_max, F_mu0, maximum, r_hjb, r_fp)


@dataclass(frozen=True)
class UniquenessReport:
    lambdas: List[float]
    measures: List[ProbabilityGrid]
    lambda_spread: float
    w1_spread: float

    @property
    def unique(self) -> bool:
        return self.lambda_spread <= 1e-6 and self.w1_spread <= 1e-6


def _iterate_from(lagrangian, coupling, mu: ProbabilityGrid, max_iter: int) -> tuple:
    lam = float("nan")
    for _ in range(max_iter):
        frozen = mu.grid.constant(coupling.value(mu))
        sol = solve_ergodic_hjb(lagrangian, frozen)
        nxt = solve_invariant_measure(GridDrift.from_potential(sol.u)).mu
        lam = sol.lam
        done = wasserstein1_circle(nxt, mu) <= 1e-12
        mu = nxt
        if done:
            break
    # report the constant of the system with F(mu) on the right-hand side
    return lam, mu


def uniqueness_check(lagrangian: LagrangianSpec, coupling: CouplingFunctional, n_starts: int = 10,
                     seed: int = 0, max_iter: int = 20, n_jobs: int = 1) -> UniquenessReport:
    """Full-system fixed-point iteration from random initial measures."""
    grid = lagrangian.grid
    rng = np.random.default_rng(seed)
    starts = [ProbabilityGrid.from_weights(grid, rng.dirichlet(np.full(grid.n_cells, 2.0)))
              for _ in range(n_starts)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_iterate_from)(lagrangian, coupling, mu, max_iter) for mu in starts
    )
    lambdas = [lam for lam, _ in results]
    measures = [mu for _, mu in results]
    w1 = max(wasserstein1_circle(measures[0], mu) for mu in measures)
    report = UniquenessReport(lambdas, measures, float(np.ptp(lambdas)), float(w1))
    logger.info(f"uniqueness check: lambda spread {report.lambda_spread:.2e}, W1 spread {report.w1_spread:.2e}")
    return report
