"""Social planner, penalized planner systems and the primal convex oracle."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize

from backend.ergodic_solvers import (
    hjb_residual,
    optimal_stationary_drift,
    solve_ergodic_hjb,
    solve_invariant_measure,
)
from backend.mfg_equilibrium import MfgEquilibrium
from backend.torus_core import (
    BracketError,
    CouplingFunctional,
    EmptyPayoffBand,
    GridDrift,
    GridField,
    LagrangianSpec,
    ProbabilityGrid,
    SolverError,
    log_diagnostics,
    wasserstein1_circle,
)

logger = logging.getLogger(__name__)

DAMPING = 0.1
FIXED_POINT_TOL = 1e-9
MAX_FIXED_POINT_ITER = 3000
LADDER_MAX = 2 ** 14


@dataclass(frozen=True)
class FixedPointRecord:
    start: str
    objective: float
    converged: bool
    iterations: int
    w1_gap: float


@dataclass(frozen=True)
class _FixedPoint:
    start: str
    u: GridField
    m: ProbabilityGrid
    alpha: GridDrift
    kinetic: float
    F_value: float
    objective: float
    converged: bool
    iterations: int
    w1_gap: float
    hjb_residual: float

    def record(self) -> FixedPointRecord:
        return FixedPointRecord(self.start, self.objective, self.converged, self.iterations, self.w1_gap)


@dataclass(frozen=True)
class PlannerSolution:
    u_tilde: GridField
    m_tilde: ProbabilityGrid
    alpha_tilde: GridDrift
    e_min: float
    kinetic: float
    F_value: float
    hjb_residual: float
    w1_gap: float
    fixed_points: Tuple[FixedPointRecord, ...] = field(default=())

    def summary(self) -> dict:
        return {"e_min": self.e_min, "kinetic": self.kinetic, "F_value": self.F_value,
                "hjb_residual": self.hjb_residual, "w1_gap": self.w1_gap}


@dataclass(frozen=True)
class PenalizedSolution:
    n: float
    u_n: GridField
    m_n: ProbabilityGrid
    alpha_n: GridDrift
    F_value: float
    kinetic: float
    hjb_residual: float
    w1_gap: float
    fixed_points: Tuple[FixedPointRecord, ...] = field(default=())

    @property
    def value(self) -> float:
        """Payoff at the end of the homotopy: stationary cost plus F."""
        return self.kinetic + self.F_value

    def summary(self) -> dict:
        return {"n": self.n, "F_value": self.F_value, "kinetic": self.kinetic, "value": self.value,
                "hjb_residual": self.hjb_residual, "w1_gap": self.w1_gap}


def initial_measures(lagrangian: LagrangianSpec, mu0: Optional[ProbabilityGrid], seed: int,
                     n_random: int = 2) -> List[Tuple[str, ProbabilityGrid]]:
    """Five starting measures; without mu0 a bump half a period from the potential minimum replaces the Gibbs start."""
    grid = lagrangian.grid
    starts = [("uniform", ProbabilityGrid.uniform(grid))]
    center = grid.nodes[int(np.argmin(lagrangian.potential.values))]
    if mu0 is not None:
        starts.append(("gibbs", mu0))
    else:
        starts.append(("shifted-bump", _bump(grid, center + 0.5)))
    starts.append(("bump", _bump(grid, center)))
    rng = np.random.default_rng(seed)
    for k in range(n_random):
        starts.append((f"random-{k}", random_smooth_density(grid, rng)))
    return starts


def _bump(grid, center: float, width: float = 0.08) -> ProbabilityGrid:
    x = grid.nodes
    gap = np.abs(x - center % 1.0)
    dist = np.minimum(gap, 1.0 - gap)
    return ProbabilityGrid.from_weights(grid, np.exp(-0.5 * (dist / width) ** 2) + 1e-3)


def random_smooth_density(grid, rng: np.random.Generator, modes: int = 4, amplitude: float = 1.0) -> ProbabilityGrid:
    x = grid.nodes
    log_w = np.zeros(grid.n_cells)
    for k in range(1, modes + 1):
        a, b = rng.normal(scale=amplitude / k, size=2)
        log_w += a * np.cos(2 * np.pi * k * x) + b * np.sin(2 * np.pi * k * x)
    return ProbabilityGrid.from_weights(grid, np.exp(log_w))


class _AndersonMixer:
    """Anderson mixing over the last ``depth`` damped steps; resets on a bad candidate."""

    def __init__(self, depth: int):
        self.depth = depth
        self.xs: List[np.ndarray] = []
        self.gs: List[np.ndarray] = []

    def reset(self) -> None:
        self.xs.clear()
        self.gs.clear()

    def propose(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.xs.append(x)
        self.gs.append(g)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        if self.depth == 0 or len(self.xs) < 2:
            return g
        res = np.array([gi - xi for gi, xi in zip(self.gs, self.xs)])
        d_res = np.diff(res, axis=0).T
        d_g = np.diff(np.array(self.gs), axis=0).T
        gamma, *_ = np.linalg.lstsq(d_res, res[-1], rcond=None)
        cand = g - d_g @ gamma
        if not np.all(np.isfinite(cand)) or np.min(cand) <= 0.0:
            self.reset()
            return g
        return cand


def _fixed_point(lagrangian: LagrangianSpec, coupling: CouplingFunctional, rhs_scale: float, start: str,
                 m: ProbabilityGrid, tau: float, tol: float, max_iter: int, depth: int = 5) -> _FixedPoint:
    """Damped iteration m <- (1 - tau) m + tau m+, m+ invariant for -Du[rhs_scale dF/dm(m)].

    The damped map is Anderson-mixed; depth=0 gives the plain damped iteration.
    """
    grid = lagrangian.grid
    mixer = _AndersonMixer(depth)
    u_prev = None
    gap = best_gap = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = GridField(grid, rhs_scale * coupling.derivative(m))
        sol = solve_ergodic_hjb(lagrangian, f, u_init=u_prev)
        u_prev = sol.u
        m_plus = solve_invariant_measure(GridDrift.from_potential(sol.u)).mu
        gap = wasserstein1_circle(m, m_plus)
        log_diagnostics(f"fixed-point[{start}]", it, gap, sol.lam)
        if gap <= tol:
            converged = True
            break
        if gap > 10.0 * best_gap:
            mixer.reset()
        best_gap = min(best_gap, gap)
        damped = (1.0 - tau) * m.masses + tau * m_plus.masses
        m = ProbabilityGrid.from_weights(grid, mixer.propose(m.masses, damped))
    if not converged:
        logger.warning(f"fixed point from '{start}' stopped at W1 gap {gap:.3e} after {it} iterations")

    sol = solve_ergodic_hjb(lagrangian, GridField(grid, rhs_scale * coupling.derivative(m)), u_init=u_prev)
    alpha = GridDrift.from_potential(sol.u)
    m_final = solve_invariant_measure(alpha).mu
    _, cost = optimal_stationary_drift(m_final, lagrangian)
    F_value = coupling.value(m_final)
    objective = cost + (F_value if rhs_scale > 0 else rhs_scale * F_value)
    f_final = GridField(grid, rhs_scale * coupling.derivative(m_final))
    residual = float(np.max(np.abs(hjb_residual(lagrangian, f_final, sol.u, sol.lam))))
    return _FixedPoint(start, sol.u, m_final, alpha, cost, F_value, objective,
                       converged, it, wasserstein1_circle(m, m_final), residual)


def _multistart(lagrangian, coupling, rhs_scale, starts, tau, tol, max_iter, n_jobs) -> List[_FixedPoint]:
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fixed_point)(lagrangian, coupling, rhs_scale, name, m0, tau, tol, max_iter)
        for name, m0 in starts
    )
    converged = [r for r in results if r.converged]
    if not converged:
        raise SolverError("no fixed point found within the iteration budget", solver="fixed-point",
                          history=[r.w1_gap for r in results])
    return sorted(converged, key=lambda r: r.objective)


def solve_planner(lagrangian: LagrangianSpec, coupling: CouplingFunctional,
                  equilibrium: Optional[MfgEquilibrium] = None, tau: float = DAMPING,
                  tol: float = FIXED_POINT_TOL, max_iter: int = MAX_FIXED_POINT_ITER, seed: int = 0,
                  n_jobs: int = 1) -> PlannerSolution:
    """Minimize the stationary cost plus F; lowest-objective fixed point over five starts."""
    mu0 = equilibrium.mu0 if equilibrium is not None else None
    starts = initial_measures(lagrangian, mu0, seed)
    found = _multistart(lagrangian, coupling, 1.0, starts, tau, tol, max_iter, n_jobs)
    best = found[0]
    logger.info(f"planner: e_min={best.objective:.10f} from start '{best.start}' "
                f"({len(found)} converged starts)")
    return PlannerSolution(best.u, best.m, best.alpha, best.objective, best.kinetic, best.F_value,
                           best.hjb_residual, best.w1_gap, tuple(r.record() for r in found))


def solve_penalized(n: float, lagrangian: LagrangianSpec, coupling: CouplingFunctional,
                    equilibrium: Optional[MfgEquilibrium] = None, tau: float = DAMPING,
                    tol: Optional[float] = None, max_iter: int = MAX_FIXED_POINT_ITER, seed: int = 0,
                    n_jobs: int = 1, warm_start: Optional[ProbabilityGrid] = None) -> PenalizedSolution:
    """Fixed point of the system with right-hand side -n dF/dm, minimizing cost - n F."""
    if n <= 0:
        raise ValueError(f"penalization must be positive, got {n}")
    if tol is None:
        tol = max(FIXED_POINT_TOL / max(1.0, n), 1e-13)
    mu0 = equilibrium.mu0 if equilibrium is not None else None
    starts = initial_measures(lagrangian, mu0, seed)
    if warm_start is not None:
        starts.append(("warm", warm_start))
    found = _multistart(lagrangian, coupling, -float(n), starts, tau, tol, max_iter, n_jobs)
    best = found[0]
    logger.info(f"penalized n={n:g}: F={best.F_value:.8f} kinetic={best.kinetic:.8f} from '{best.start}'")
    return PenalizedSolution(float(n), best.u, best.m, best.alpha, best.F_value, best.kinetic,
                             best.hjb_residual, best.w1_gap, tuple(r.record() for r in found))


def penalization_ladder(n_max: float = LADDER_MAX) -> List[float]:
    ladder, n = [], 1.0
    while n <= n_max:
        ladder.append(n)
        n *= 2.0
    return ladder


def solve_penalized_ladder(lagrangian, coupling, equilibrium=None, n_max: float = 64.0,
                           **kwargs) -> List[PenalizedSolution]:
    """Warm-started solves on the dyadic rungs below n_max, ending at n_max itself."""
    rungs = [n for n in penalization_ladder(n_max) if n < n_max] + [float(n_max)]
    solutions, warm = [], None
    for n in rungs:
        sol = solve_penalized(n, lagrangian, coupling, equilibrium, warm_start=warm, **kwargs)
        solutions.append(sol)
        warm = sol.m_n
    return solutions


@dataclass(frozen=True)
class PenalizationStep:
    n: float
    F_value: float
    kinetic: float
    e_N: float
    punishment: float
    satisfied: bool
    reason: str = ""


@dataclass(frozen=True)
class PenalizationChoice:
    solution: PenalizedSolution
    history: Tuple[PenalizationStep, ...]


def select_penalization(e_target: float, N: int, lagrangian: LagrangianSpec, coupling: CouplingFunctional,
                        equilibrium: MfgEquilibrium, evaluate_eN: Callable[[PenalizedSolution], float],
                        margin: float = 0.01, n_max: float = LADDER_MAX, **kwargs) -> PenalizationChoice:
    """Smallest ladder n with e^N <= -lambda0 + E F(empirical of N-1 draws from m^n) - margin.

    ``evaluate_eN`` builds the target for a candidate penalized solution and
    returns e^N; it raises BracketError when that solution cannot bracket e.
    """
    if coupling.is_constant() or e_target >= equilibrium.e_max:
        raise EmptyPayoffBand(f"target {e_target:.6g} outside the payoff band (e_max={equilibrium.e_max:.6g})")
    history: List[PenalizationStep] = []
    warm = None
    for n in penalization_ladder(n_max):
        sol = solve_penalized(n, lagrangian, coupling, equilibrium, warm_start=warm, **kwargs)
        warm = sol.m_n
        punishment = -equilibrium.lambda0 + coupling.expected_empirical(sol.m_n, N - 1)
        try:
            e_N = evaluate_eN(sol)
        except BracketError as exc:
            history.append(PenalizationStep(n, sol.F_value, sol.kinetic, float("nan"), punishment, False, str(exc)))
            continue
        ok = e_N <= punishment - margin
        history.append(PenalizationStep(n, sol.F_value, sol.kinetic, e_N, punishment, ok))
        logger.info(f"penalization n={n:g}: e^N={e_N:.6f} punishment={punishment:.6f} ok={ok}")
        if ok:
            return PenalizationChoice(sol, tuple(history))
    raise SolverError(f"penalization ladder exhausted at n={n_max:g}: target too close to e_max for N={N}",
                      solver="select-penalization", history=[s.punishment for s in history])


@dataclass(frozen=True)
class PrimalOracleResult:
    value: float
    m: Optional[ProbabilityGrid]
    flux: float
    applicable: bool


def _primal_objective(z: np.ndarray, lagrangian: LagrangianSpec, coupling: CouplingFunctional):
    grid = lagrangian.grid
    n, h = grid.n_cells, grid.h
    logits, J = z[:n], z[n]
    e = np.exp(logits - np.max(logits))
    m = e / (np.sum(e) * h)
    s = np.sqrt(m)
    s_next = np.roll(s, -1)
    theta = (0.5 * (s + s_next)) ** 2
    a = 0.5 * (np.roll(m, -1) - m) / h + J
    q = a / theta
    kinetic = np.sum(0.5 * a * q) * h
    masses = m * h
    value = kinetic + np.sum(lagrangian.V * masses) + float(coupling.value_batch(masses))

    # partial derivatives with respect to the density values m_i
    dtheta_self = (s + s_next) / (4.0 * s)
    dtheta_next = (s + s_next) / (4.0 * s_next)
    g = (-0.5 * q + 0.5 * np.roll(q, 1)) \
        - 0.5 * q ** 2 * dtheta_self * h - np.roll(0.5 * q ** 2 * dtheta_next, 1) * h
    g = g + lagrangian.V * h
    dF = np.zeros(n)
    for term in coupling.terms:
        dF += term.derivative(masses)
    g = g + dF * h
    grad_logits = m * (g - np.sum(g * m) * h)
    grad_J = np.sum(q) * h
    return value, np.append(grad_logits, grad_J)


def primal_oracle(lagrangian: LagrangianSpec, coupling: CouplingFunctional,
                  init: Optional[ProbabilityGrid] = None) -> PrimalOracleResult:
    """min sum[w^2/(2 theta) + V m] h + F(m) subject to Dm/2 = w - J, over densities and fluxes."""
    if not coupling.is_convex():
        logger.warning("primal oracle inapplicable: coupling is not convex")
        return PrimalOracleResult(float("nan"), None, float("nan"), False)
    grid = lagrangian.grid
    m0 = init.density if init is not None else np.ones(grid.n_cells)
    z0 = np.append(np.log(m0), 0.0)
    result = minimize(_primal_objective, z0, args=(lagrangian, coupling), jac=True, method="L-BFGS-B",
                      options={"maxiter": 20000, "maxcor": 30, "ftol": 1e-15, "gtol": 1e-12})
    logits = result.x[:-1]
    e = np.exp(logits - np.max(logits))
    m = ProbabilityGrid.from_weights(grid, e)
    logger.info(f"primal oracle: value={result.fun:.10f} ({result.nit} iterations, {result.message})")
    return PrimalOracleResult(float(result.fun), m, float(result.x[-1]), True)
