import logging
from dataclasses import replace
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from backend.ergodic_solvers import solve_invariant_measure
from backend.nplayer_sim.Simulator import RUN_RECORD_COLUMNS, SimulationResult, estimate_payoffs
from backend.nplayer_sim.State import DeviationPolicy, SimulationSettings, TriggerParams
from backend.target_construction import TargetPair, compute_eN
from backend.torus_core import CouplingFunctional, LagrangianSpec, ProbabilityGrid, wasserstein1_circle

logger = logging.getLogger(__name__)

STAT_MULTIPLIER = 3.0
# deviators must be caught in this share of runs; conformers may be punished in at most 1 - DETECTION_RATE
DETECTION_RATE = 0.95


def run_deviations(settings: SimulationSettings, params: TriggerParams, policies: Dict[str, DeviationPolicy],
                   lagrangian: LagrangianSpec, coupling: CouplingFunctional) -> Dict[str, SimulationResult]:
    return {name: estimate_payoffs(settings, params, policy, lagrangian, coupling)
            for name, policy in policies.items()}


def deviation_table(results: Dict[str, SimulationResult], policies: Dict[str, DeviationPolicy],
                    params: TriggerParams, e_N: float, epsilon: float) -> pd.DataFrame:
    """Pass/fail table: conforming payoffs near e^N, deviators gain at most epsilon and get caught.

    ``passed`` is the payoff bound alone; ``resists`` also requires the trigger
    to fire for deviators and to stay quiet for conformers.
    """
    rows = []
    for name, result in results.items():
        policy = policies[name]
        if policy.is_conform:
            quiet = result.p_trigger <= 1.0 - DETECTION_RATE
            for player, est in enumerate(result.estimates):
                budget = epsilon + STAT_MULTIPLIER * est.stderr
                rows.append(_row(name, player, est, e_N - budget, e_N + budget,
                                 abs(est.mean - e_N) <= budget, quiet, None))
            continue
        est = result.estimates[0]
        bound = e_N - epsilon - STAT_MULTIPLIER * est.stderr
        own = solve_invariant_measure(policy.drift).mu
        rows.append(_row(name, 0, est, bound, np.inf, est.mean >= bound, result.p_trigger >= DETECTION_RATE,
                         wasserstein1_circle(own, params.reference)))
    table = pd.DataFrame(rows)
    failed = table.loc[~table["resists"], "policy"].unique().tolist()
    if failed:
        logger.warning(f"deviation suite findings: {failed}")
    else:
        logger.info("deviation suite: every row passed")
    return table


def deviation_suite(settings: SimulationSettings, params: TriggerParams, policies: Dict[str, DeviationPolicy],
                    e_N: float, epsilon: float, lagrangian: LagrangianSpec,
                    coupling: CouplingFunctional) -> pd.DataFrame:
    results = run_deviations(settings, params, policies, lagrangian, coupling)
    return deviation_table(results, policies, params, e_N, epsilon)


def deviation_runs(results: Dict[str, SimulationResult]) -> pd.DataFrame:
    """Per-run records of every policy, tagged with the policy name."""
    frames = [result.runs[RUN_RECORD_COLUMNS].assign(policy=name) for name, result in results.items()]
    return pd.concat(frames, ignore_index=True)[["policy"] + RUN_RECORD_COLUMNS]


def _row(policy: str, player: int, est, lower: float, upper: float, passed: bool, trigger_ok: bool,
         w1_policy: Optional[float]) -> dict:
    return {
        "policy": policy,
        "player": player,
        "mean": est.mean,
        "stderr": est.stderr,
        "p_trigger": est.p_trigger,
        "lower": lower,
        "upper": upper,
        "passed": bool(passed),
        "trigger_ok": bool(trigger_ok),
        "resists": bool(passed and trigger_ok),
        "w1_policy_measure": np.nan if w1_policy is None else w1_policy,
    }


def sweep_N(settings: SimulationSettings, params: TriggerParams, target: TargetPair, coupling: CouplingFunctional,
            lagrangian: LagrangianSpec, N_list: Sequence[int], simulate: bool = False) -> pd.DataFrame:
    """e^N, its distance to e and optionally the simulated conforming payoff for each N."""
    if list(N_list) != sorted(N_list):
        raise ValueError("N_list must be ascending")
    rows = []
    for N in N_list:
        payoff = compute_eN(N, target, coupling)
        row = {"N": int(N), "e": target.e, "e_N": payoff.e_N, "gap": payoff.e_N - target.value,
               "gap_times_M": (payoff.e_N - target.value) * (N - 1)}
        if simulate:
            result = estimate_payoffs(replace(settings, N=int(N)), params, DeviationPolicy.conform(),
                                      lagrangian, coupling)
            row.update({"simulated": result.estimates[0].mean, "simulated_stderr": result.estimates[0].stderr,
                        "p_trigger": result.p_trigger})
        rows.append(row)
    return pd.DataFrame(rows)


def punishment_marginals(settings: SimulationSettings, params: TriggerParams, m_n: ProbabilityGrid,
                         lagrangian: LagrangianSpec, coupling: CouplingFunctional) -> SimulationResult:
    """All players on the punishment drift from time zero; occupations measured against m^n."""
    punished = replace(params, conform=params.punish, reference=m_n, T=settings.horizon * 10.0)
    return estimate_payoffs(settings, punished, DeviationPolicy.conform(), lagrangian, coupling)
