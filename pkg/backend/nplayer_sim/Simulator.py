"""Euler-Maruyama simulation of the N-player game under trigger strategies."""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from backend.nplayer_sim.State import (
    DeviationPolicy,
    NoiseStreams,
    PathState,
    PayoffEstimate,
    SimulationSettings,
    TriggerParams,
)
from backend.torus_core import (
    CouplingFunctional,
    LagrangianSpec,
    periodic_interpolate,
    project_to_torus,
)

logger = logging.getLogger(__name__)

PATH_COLUMNS = ["t", "player", "position"]


def _check_schedule(params: TriggerParams, dt: float) -> Tuple[int, int]:
    """(first step at or after T, steps between checks)."""
    first = int(math.ceil(params.T / dt - 1e-9))
    every = max(1, int(round(params.check_interval / dt)))
    return first, every


def current_drift(state: PathState, params: TriggerParams, deviation: DeviationPolicy) -> np.ndarray:
    """Drift of every player at the current time; player 0 is the deviator."""
    X = state.positions
    conforming = (state.t <= state.theta)[:, None]
    drift = np.where(conforming, params.conform.interpolate(X), params.punish.interpolate(X))
    if not deviation.is_conform:
        drift[:, 0] = deviation.drift.interpolate(X[:, 0])
    return drift


def update_trigger(state: PathState, params: TriggerParams) -> None:
    """Set theta = t for runs where some occupation is delta-far from the reference."""
    first, every = _check_schedule(params, state.dt)
    if state.steps < first or (state.steps - first) % every:
        return
    waiting = np.isinf(state.theta)
    if not np.any(waiting):
        return
    far = np.max(state.occupation_distance(params.reference), axis=1) >= params.delta
    state.theta[waiting & far] = state.t


def step(state: PathState, params: TriggerParams, deviation: DeviationPolicy, dt: Optional[float] = None) -> PathState:
    """Advance every run by one Euler-Maruyama step, in place."""
    dt = state.dt if dt is None else dt
    if not 0.0 < dt <= 1e-2:
        raise ValueError(f"dt must lie in (0, 1e-2], got {dt}")
    if dt != state.dt:
        raise ValueError("dt must stay fixed along a path")
    drift = current_drift(state, params, deviation)
    state.drift = drift
    xi = state.noise.next()
    state.positions = project_to_torus(state.positions + drift * dt + math.sqrt(dt) * xi)
    state.steps += 1
    cells = state.grid.cell_index(state.positions)
    R, N = cells.shape
    flat = state.counts.reshape(R * N, -1)
    flat[np.arange(R * N), cells.ravel()] += 1
    update_trigger(state, params)
    return state


def initial_positions(noise: NoiseStreams, params: TriggerParams) -> np.ndarray:
    """Independent draws from the reference measure, uniform inside the drawn cell."""
    grid = params.grid
    cdf = np.cumsum(params.reference.masses)
    cdf[-1] = 1.0
    out = np.empty((len(noise.generators), len(noise.generators[0])))
    for r, row in enumerate(noise.generators):
        for j, g in enumerate(row):
            cell = int(np.searchsorted(cdf, g.random(), side="right"))
            out[r, j] = (min(cell, grid.n_cells - 1) + g.random()) * grid.h
    return project_to_torus(out)


@dataclass
class BatchResult:
    run_ids: np.ndarray
    payoff: np.ndarray
    running_cost: np.ndarray
    theta: np.ndarray
    w1_occupation: np.ndarray
    path: Optional[pd.DataFrame]


def simulate_batch(run_ids: np.ndarray, settings: SimulationSettings, params: TriggerParams,
                   deviation: DeviationPolicy, lagrangian: LagrangianSpec,
                   coupling: CouplingFunctional) -> BatchResult:
    seeds = np.random.SeedSequence(settings.seed).spawn(int(np.max(run_ids)) + 1)
    noise = NoiseStreams([seeds[i] for i in run_ids], settings.N)
    state = PathState.start(params.grid, initial_positions(noise, params), np.asarray(run_ids), noise,
                            settings.dt)
    R, N = state.positions.shape
    V = lagrangian.V
    burn_steps = int(round(settings.burn_in / settings.dt))
    total = np.zeros((R, N))
    running = np.zeros((R, N))
    samples = 0
    record = settings.record_stride > 0 and 0 in set(int(i) for i in run_ids)
    rows: List[tuple] = []
    record_row = int(np.flatnonzero(np.asarray(run_ids) == 0)[0]) if record else -1

    for k in range(settings.n_steps):
        if k >= burn_steps and k % settings.cost_stride == 0:
            drift = current_drift(state, params, deviation)
            running_rate = 0.5 * drift ** 2 + periodic_interpolate(V, state.positions)
            cells = state.grid.cell_index(state.positions)
            running += running_rate
            total += running_rate + coupling.leave_one_out(cells)
            samples += 1
        step(state, params, deviation)
        if record and state.steps % settings.record_stride == 0:
            t = state.t
            rows.extend((t, j, float(state.positions[record_row, j])) for j in range(N))

    samples = max(samples, 1)
    path = pd.DataFrame(rows, columns=PATH_COLUMNS) if record else None
    return BatchResult(np.asarray(run_ids), total / samples, running / samples, state.theta.copy(),
                       state.occupation_distance(params.reference), path)


RUN_RECORD_COLUMNS = ["run", "player", "payoff", "theta"]


@dataclass
class SimulationResult:
    estimates: List[PayoffEstimate]
    runs: pd.DataFrame
    path: Optional[pd.DataFrame]

    @property
    def p_trigger(self) -> float:
        return self.estimates[0].p_trigger


def estimate_payoffs(settings: SimulationSettings, params: TriggerParams, deviation: DeviationPolicy,
                     lagrangian: LagrangianSpec, coupling: CouplingFunctional) -> SimulationResult:
    """Per-player ergodic payoff estimates over independent runs."""
    batches = np.array_split(np.arange(settings.n_runs), max(1, min(settings.n_jobs, settings.n_runs)))
    results = Parallel(n_jobs=settings.n_jobs)(
        delayed(simulate_batch)(ids, settings, params, deviation, lagrangian, coupling)
        for ids in batches if len(ids)
    )
    payoff = np.concatenate([r.payoff for r in results])
    running = np.concatenate([r.running_cost for r in results])
    theta = np.concatenate([r.theta for r in results])
    w1 = np.concatenate([r.w1_occupation for r in results])
    p_trigger = float(np.mean(theta < settings.horizon))
    estimates = [PayoffEstimate.from_samples(payoff[:, j], settings.horizon, settings.burn_in, p_trigger)
                 for j in range(settings.N)]
    R, N = payoff.shape
    runs = pd.DataFrame({
        "run": np.repeat(np.arange(R), N),
        "player": np.tile(np.arange(N), R),
        "payoff": payoff.ravel(),
        "running_cost": running.ravel(),
        "theta": np.repeat(theta, N),
        "w1_occupation": w1.ravel(),
    })
    path = next((r.path for r in results if r.path is not None), None)
    logger.info(f"{deviation.kind}: player-0 payoff {estimates[0].mean:.5f} +/- {estimates[0].stderr:.5f}, "
                f"p_trigger={p_trigger:.3f} over {R} runs")
    return SimulationResult(estimates, runs, path)


def trigger_time_from_path(path: pd.DataFrame, params: TriggerParams, dt: float) -> float:
    """Replay theta from a path recorded at every step."""
    grid = params.grid
    steps = np.rint(path["t"].to_numpy() / dt).astype(np.int64)
    order = np.lexsort((path["player"].to_numpy(), steps))
    steps = steps[order]
    players = path["player"].to_numpy()[order]
    positions = path["position"].to_numpy()[order]
    N = int(players.max()) + 1
    if np.any(np.diff(np.unique(steps)) != 1) or steps[0] != 1:
        raise ValueError("path must be recorded at every step to replay the trigger")
    positions = positions.reshape(-1, N)
    state = PathState.start(grid, positions[:1].copy(), np.array([0]), None, dt)
    for k in range(positions.shape[0]):
        state.positions = positions[k:k + 1]
        state.steps = k + 1
        cells = grid.cell_index(state.positions)
        state.counts[0, np.arange(N), cells[0]] += 1
        update_trigger(state, params)
    return float(state.theta[0])


def write_path_csv(path: pd.DataFrame, target) -> None:
    path[PATH_COLUMNS].to_csv(target, index=False, float_format="%.17g")


def read_path_csv(source) -> pd.DataFrame:
    return pd.read_csv(source, float_precision="round_trip")


def calibrate_grace_period(settings: SimulationSettings, params: TriggerParams, lagrangian: LagrangianSpec,
                           coupling: CouplingFunctional, target: float = 0.05,
                           max_doublings: int = 6) -> Tuple[TriggerParams, SimulationResult]:
    """Double T until the all-conform trigger probability is at most ``target``."""
    current = params
    result = estimate_payoffs(settings, current, DeviationPolicy.conform(), lagrangian, coupling)
    for _ in range(max_doublings):
        if result.p_trigger <= target or current.T >= settings.horizon:
            break
        current = replace(current, T=2.0 * current.T)
        logger.info(f"p_trigger={result.p_trigger:.3f} > {target}; doubling T to {current.T:g}")
        result = estimate_payoffs(settings, current, DeviationPolicy.conform(), lagrangian, coupling)
    return current, result
