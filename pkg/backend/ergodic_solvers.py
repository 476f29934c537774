"""Stationary HJB / Fokker-Planck solvers on the circle and their oracles.

The HJB  -u''/2 + (u')^2/2 - V - f = lambda  is discretized through the
Cole-Hopf consistent monotone scheme

    (exp(-(u_{i+1}-u_i)) + exp(-(u_{i-1}-u_i)) - 2) / (2 h^2) - V_i - f_i = lambda,

so w = exp(-u) is exactly the Perron eigenvector of the periodic matrix
Delta_h/2 - diag(V + f).  The Fokker-Planck operator uses Scharfetter-Gummel
face fluxes, whose null vector for the drift -Du is exactly exp(-2u)/Z.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import splu, spsolve

from backend.torus_core import (
    A_MAX,
    GridDrift,
    GridField,
    LagrangianSpec,
    ProbabilityGrid,
    SolverError,
    TorusGrid,
    log_diagnostics,
)

logger = logging.getLogger(__name__)

HJB_TOL = 1e-10
HJB_MAX_ITER = 200
FP_TOL = 1e-12


@dataclass(frozen=True)
class ErgodicSolution:
    u: GridField
    lam: float
    residual: float
    iterations: int
    method: str


@dataclass(frozen=True)
class StationaryMeasure:
    mu: ProbabilityGrid
    residual: float
    iterations: int


@dataclass(frozen=True)
class MdpResult:
    value: float
    iterations: int
    policy: np.ndarray
    converged: bool


def bernoulli(x):
    """B(x) = x / (exp(x) - 1), B(0) = 1."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-10
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = x / np.expm1(np.where(small, 1.0, x))
    return np.where(small, 1.0 - 0.5 * x, out)


def _total_potential(lagrangian: LagrangianSpec, f: Optional[GridField]) -> np.ndarray:
    if f is None:
        return lagrangian.V
    lagrangian.grid.require_same(f.grid)
    return lagrangian.V + f.values


def hjb_residual(lagrangian: LagrangianSpec, f: Optional[GridField], u: GridField, lam: float) -> np.ndarray:
    """Per-node residual of the discrete ergodic HJB."""
    v = u.values
    h = u.grid.h
    dp = np.roll(v, -1) - v
    dm = np.roll(v, 1) - v
    return (np.exp(-dp) + np.exp(-dm) - 2.0) / (2.0 * h * h) - _total_potential(lagrangian, f) - lam


def _newton(lagrangian, W, u0: np.ndarray, tol: float, max_iter: int, history: List[float]):
    grid = lagrangian.grid
    n, h = grid.n_cells, grid.h
    idx = np.arange(n)
    u = u0 - np.mean(u0)
    lam = float(np.mean((np.exp(-(np.roll(u, -1) - u)) + np.exp(-(np.roll(u, 1) - u)) - 2.0) / (2 * h * h) - W))

    def residual(u, lam):
        dp = np.roll(u, -1) - u
        dm = np.roll(u, 1) - u
        r = (np.exp(-dp) + np.exp(-dm) - 2.0) / (2.0 * h * h) - W - lam
        return np.append(r, np.sum(u) * h)

    res = residual(u, lam)
    steps = 0
    for it in range(max_iter):
        norm = float(np.max(np.abs(res)))
        history.append(norm)
        log_diagnostics("hjb-newton", it, norm, lam)
        if norm <= tol:
            return u, lam, norm, steps
        ep = np.exp(-(np.roll(u, -1) - u)) / (2 * h * h)
        em = np.exp(-(np.roll(u, 1) - u)) / (2 * h * h)
        rows = np.concatenate([idx, idx, idx, idx, np.full(n, n)])
        cols = np.concatenate([np.roll(idx, -1), np.roll(idx, 1), idx, np.full(n, n), idx])
        data = np.concatenate([-ep, -em, ep + em, -np.ones(n), np.full(n, h)])
        jac = sp.csc_matrix((data, (rows, cols)), shape=(n + 1, n + 1))
        step = spsolve(jac, -res)
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        accepted = False
        for _ in range(40):
            cand_u = u + t * step[:n]
            cand_lam = lam + t * step[n]
            cand = residual(cand_u, cand_lam)
            cand_norm = float(np.max(np.abs(cand)))
            if np.isfinite(cand_norm) and cand_norm <= (1.0 - 1e-4 * t) * norm:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            logger.info(f"hjb newton line search failed at iteration {it}, residual {norm:.3e}")
            break
        u, lam, res = cand_u, cand_lam, cand
        steps += 1
    return u, lam, float(np.max(np.abs(res))), steps


def _heat_flow(lagrangian, W, tau: float, max_steps: int, tol: float, history: List[float]):
    """Implicit Euler on w = exp(-u) for w_t = w''/2 - (V + f) w."""
    grid = lagrangian.grid
    n, h = grid.n_cells, grid.h
    A = _schrodinger_matrix(grid, W)
    solver = splu(sp.csc_matrix(sp.identity(n) - tau * A))
    w = np.ones(n)
    lam = 0.0
    for step in range(max_steps):
        w_next = solver.solve(w)
        w_next /= np.max(w_next)
        lam_next = float(w_next @ (A @ w_next) / (w_next @ w_next))
        change = float(np.max(np.abs(w_next - w)))
        history.append(change)
        log_diagnostics("hjb-heat", step, change, lam_next)
        w, lam = w_next, lam_next
        if change <= tol:
            break
    u = -np.log(w)
    return u - np.mean(u), lam


def _schrodinger_matrix(grid: TorusGrid, W: np.ndarray) -> sp.csr_matrix:
    n, h = grid.n_cells, grid.h
    off = np.full(n, 0.5 / h ** 2)
    A = sp.diags([off[:-1], -W - 1.0 / h ** 2, off[:-1]], [-1, 0, 1], shape=(n, n), format="lil")
    A[0, n - 1] = 0.5 / h ** 2
    A[n - 1, 0] = 0.5 / h ** 2
    return A.tocsr()


def solve_ergodic_hjb(lagrangian: LagrangianSpec, f: Optional[GridField] = None, tol: float = HJB_TOL,
                      max_iter: int = HJB_MAX_ITER, u_init: Optional[GridField] = None) -> ErgodicSolution:
    """Solve -u''/2 + H(u', x) = lambda + f with sum(u) h = 0."""
    grid = lagrangian.grid
    W = _total_potential(lagrangian, f)
    history: List[float] = []
    u0 = np.zeros(grid.n_cells) if u_init is None else np.array(u_init.values)
    u, lam, norm, iterations = _newton(lagrangian, W, u0, tol, max_iter, history)
    if norm <= tol:
        return ErgodicSolution(GridField(grid, u), float(lam), norm, iterations, "newton")

    logger.warning(f"hjb newton stalled at residual {norm:.3e}; switching to heat-flow fallback")
    # keeps I - tau A positive definite: the top eigenvalue is at most -min(W)
    tau = 0.5 / (1.0 + max(0.0, -float(np.min(W))))
    u_flow, lam_flow = _heat_flow(lagrangian, W, tau=tau, max_steps=20000, tol=1e-14, history=history)
    u, lam, norm, more = _newton(lagrangian, W, u_flow, tol, max_iter, history)
    if norm <= tol:
        return ErgodicSolution(GridField(grid, u), float(lam), norm, iterations + more, "heat-flow")
    raise SolverError(f"ergodic HJB did not converge (residual {norm:.3e})", solver="hjb", history=history,
                      diagnostics={"lambda_heat_flow": lam_flow})


def principal_eigen_oracle(lagrangian: LagrangianSpec, f: Optional[GridField] = None) -> Tuple[float, GridField]:
    """Top eigenpair of Delta_h/2 - V - f with positive eigenvector, max w = 1."""
    grid = lagrangian.grid
    A = _schrodinger_matrix(grid, _total_potential(lagrangian, f)).toarray()
    n = grid.n_cells
    vals, vecs = scipy.linalg.eigh(A, subset_by_index=[n - 1, n - 1])
    w = np.abs(vecs[:, 0])
    return float(vals[0]), GridField(grid, w / np.max(w))


def eigen_potential(w: GridField) -> GridField:
    """u = -log w, recentered."""
    return GridField(w.grid, -np.log(w.values)).normalized()


def fokker_planck_matrix(drift: GridDrift) -> sp.csc_matrix:
    """Columns sum to zero; M m = 0 is the discrete stationary equation."""
    grid = drift.grid
    n, h = grid.n_cells, grid.h
    P = 2.0 * drift.faces * h
    bp, bm = bernoulli(P), bernoulli(-P)
    idx = np.arange(n)
    c = 0.5 / h ** 2
    diag = c * (bm + np.roll(bp, 1))
    upper = -c * bp
    lower = -c * np.roll(bm, 1)
    rows = np.concatenate([idx, idx, idx])
    cols = np.concatenate([idx, np.roll(idx, -1), np.roll(idx, 1)])
    return sp.csc_matrix((np.concatenate([diag, upper, lower]), (rows, cols)), shape=(n, n))


def stationary_flux(drift: GridDrift, m: ProbabilityGrid) -> np.ndarray:
    """Scharfetter-Gummel flux through each right face."""
    h = drift.grid.h
    P = 2.0 * drift.faces * h
    d = m.density
    return 0.5 / h * (bernoulli(-P) * d - bernoulli(P) * np.roll(d, -1))


def fokker_planck_residual(drift: GridDrift, m: ProbabilityGrid) -> float:
    drift.grid.require_same(m.grid)
    return float(np.max(np.abs(fokker_planck_matrix(drift) @ m.density)))


def solve_invariant_measure(drift: GridDrift, tol: float = FP_TOL, max_iter: int = 50) -> StationaryMeasure:
    """Null vector of the Fokker-Planck matrix by shifted inverse iteration."""
    grid = drift.grid
    n, h = grid.n_cells, grid.h
    M = fokker_planck_matrix(drift)
    scale = float(np.max(np.abs(M.diagonal())))
    shift = 1e-9 * scale
    lu = splu(sp.csc_matrix(M + shift * sp.identity(n)))
    x = np.ones(n)
    history: List[float] = []
    rel = np.inf
    for it in range(1, max_iter + 1):
        x = lu.solve(x)
        x = np.abs(x)
        x /= np.sum(x) * h
        rel = float(np.max(np.abs(M @ x)) / (scale * np.max(x)))
        history.append(rel)
        log_diagnostics("fokker-planck", it, rel)
        if rel <= tol:
            mu = ProbabilityGrid.from_weights(grid, x)
            if np.min(mu.density) <= 0.0:
                break
            return StationaryMeasure(mu, rel, it)
    raise SolverError(f"invariant measure iteration stagnated (relative residual {rel:.3e})",
                      solver="fokker-planck", history=history,
                      diagnostics={"shift": shift, "scale": scale, "min_density": float(np.min(x))})


def kinetic_energy(drift: GridDrift, m: ProbabilityGrid) -> float:
    """sum over faces of a_f^2/2 theta_f h, theta_f the squared log-mean of sqrt(m)."""
    drift.grid.require_same(m.grid)
    s = np.sqrt(m.density)
    theta = _logmean(s, np.roll(s, -1)) ** 2
    return float(np.sum(0.5 * drift.faces ** 2 * theta) * drift.grid.h)


def _logmean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    close = np.abs(a - b) <= 1e-12 * np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (b - a) / (np.log(b) - np.log(a))
    return np.where(close, 0.5 * (a + b), out)


def stationary_cost(drift: GridDrift, m: ProbabilityGrid, lagrangian: LagrangianSpec) -> float:
    """Discrete integral of L(drift, x) against m."""
    return kinetic_energy(drift, m) + m.expectation(lagrangian.V)


def optimal_stationary_drift(m: ProbabilityGrid, lagrangian: LagrangianSpec) -> Tuple[GridDrift, float]:
    """Zero-flux drift keeping m stationary and its cost."""
    if np.any(m.density <= 0.0):
        raise ValueError("optimal stationary drift needs a strictly positive density")
    logm = np.log(m.density)
    alpha = GridDrift.from_faces(m.grid, (np.roll(logm, -1) - logm) / (2.0 * m.grid.h))
    return alpha, stationary_cost(alpha, m, lagrangian)


def stationary_drift_for_flux(m: ProbabilityGrid, flux: float) -> GridDrift:
    """Admissible drift carrying the constant probability flux ``flux``."""
    if np.any(m.density <= 0.0):
        raise ValueError("needs a strictly positive density")
    h = m.grid.h
    d = m.density
    nxt = np.roll(d, -1)
    faces = np.empty_like(d)
    for i in range(d.size):
        def g(P, a=d[i], b=nxt[i]):
            return P * a - bernoulli(P) * (b - a) - 2.0 * h * flux
        lo, hi = -1.0, 1.0
        while g(lo) > 0.0:
            lo *= 2.0
        while g(hi) < 0.0:
            hi *= 2.0
        faces[i] = brentq(g, lo, hi, xtol=1e-15, rtol=1e-15) / (2.0 * h)
    return GridDrift.from_faces(m.grid, faces)


def closed_measure_min_oracle(lagrangian: LagrangianSpec, action_grid: Sequence[float], tol: float = 1e-9,
                              max_iter: int = 500000, a_max: float = A_MAX) -> MdpResult:
    """Average-cost controlled walk solved by relative value iteration.

    The walk jumps to the right at rate 1/(2h^2) + a+/h and to the left at
    rate 1/(2h^2) + a-/h, so its generator is Delta_h/2 plus the upwind a D.
    """
    actions = np.asarray(action_grid, dtype=float)
    grid = lagrangian.grid
    h = grid.h
    rate = 1.1 * (1.0 / h ** 2 + max(a_max, float(np.max(np.abs(actions)))) / h)
    right = (0.5 / h ** 2 + np.maximum(actions, 0.0) / h) / rate
    left = (0.5 / h ** 2 + np.maximum(-actions, 0.0) / h) / rate
    stay = 1.0 - right - left
    # cost per uniformized step, shape (actions, cells)
    cost = (0.5 * actions[:, None] ** 2 + lagrangian.V[None, :]) / rate
    v = np.zeros(grid.n_cells)
    lo = hi = 0.0
    for it in range(max_iter):
        q = cost + right[:, None] * np.roll(v, -1)[None, :] + left[:, None] * np.roll(v, 1)[None, :] \
            + stay[:, None] * v[None, :]
        tv = np.min(q, axis=0)
        diff = tv - v
        lo, hi = float(np.min(diff)), float(np.max(diff))
        v = tv - tv[0]
        if it % 1000 == 0:
            log_diagnostics("mdp-rvi", it, hi - lo, 0.5 * (hi + lo) * rate)
        if hi - lo <= tol / rate:
            policy = actions[np.argmin(q, axis=0)]
            return MdpResult(0.5 * (hi + lo) * rate, it + 1, policy, True)
    logger.warning(f"relative value iteration stopped with span {hi - lo:.3e}")
    raise SolverError("relative value iteration did not converge", solver="mdp-rvi", history=[hi - lo])
