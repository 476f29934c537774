import functools
import logging
from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from langgraph.graph import END, StateGraph

from backend.harness.artifact_store import ArtifactStore
from backend.harness.ExperimentConfig import ExperimentConfig
from backend.harness.State import PipelineState
from backend.mfg_equilibrium import solve_mfg
from backend.nplayer_sim.DeviationSuite import deviation_runs, deviation_table, run_deviations, sweep_N
from backend.nplayer_sim.Simulator import (RUN_RECORD_COLUMNS, calibrate_grace_period, estimate_payoffs,
                                           write_path_csv)
from backend.nplayer_sim.State import DeviationPolicy, SimulationSettings, TriggerParams
from backend.social_planner import select_penalization, solve_penalized_ladder, solve_planner
from backend.target_construction import build_target, calibrate_delta, compute_eN, value_profile
from backend.torus_core import ConfigurationError, EmptyPayoffBand, GridDrift, GridField, ProbabilityGrid

logger = logging.getLogger(__name__)

STAGES = ["mfg", "planner", "penalized", "target", "calibrate", "simulate", "deviate", "sweep"]

NODE_NAMES = {
    "setup": "setup_run",
    "mfg": "solve_mfg",
    "planner": "solve_planner",
    "penalized": "select_penalization",
    "target": "build_target",
    "calibrate": "calibrate_trigger",
    "simulate": "simulate_conform",
    "deviate": "run_deviations",
    "sweep": "sweep_players",
    "finalize": "finalize_run",
}

COMMAND_STAGES: Dict[str, List[str]] = {
    "mfg": STAGES[:1],
    "planner": STAGES[:2],
    "penalized": STAGES[:3],
    "target": STAGES[:4],
    "calibrate": STAGES[:5],
    "simulate": STAGES[:6],
    "deviate": STAGES[:5] + ["deviate"],
    "sweep-n": STAGES[:4] + ["sweep"],
    "pipeline": list(STAGES),
}

# conforming payoff budget on top of 3 standard errors
DISCRETIZATION_BUDGET = 0.02
PROFILE_POINTS = 21


def _stage(name: str) -> Callable:
    """Run a stage, record its summary and turn any exception into a halting status."""

    def wrap(fn):
        @functools.wraps(fn)
        def node(self, state: PipelineState) -> dict:
            logger.info(f"stage '{name}' started")
            try:
                update, summary = fn(self, state)
            except Exception as exc:
                logger.exception(f"stage '{name}' failed")
                error = {"stage": name, "type": type(exc).__name__, "message": str(exc)}
                for attr in ("solver", "history", "diagnostics", "name", "value", "tolerance"):
                    if hasattr(exc, attr):
                        error[attr] = getattr(exc, attr)
                return {"status": "failed", "error": error}
            update = dict(update)
            update["stages_done"] = list(state.get("stages_done", [])) + [name]
            update["summary"] = {**state.get("summary", {}), name: summary}
            return update

        return node

    return wrap


def _profile(grid, **columns) -> pd.DataFrame:
    frame = pd.DataFrame({"node": grid.nodes})
    for key, value in columns.items():
        if isinstance(value, GridDrift):
            frame[key] = value.values
        elif isinstance(value, ProbabilityGrid):
            frame[key] = value.density
        elif isinstance(value, GridField):
            frame[key] = value.values
        else:
            frame[key] = value
    return frame


def resolve_e(choice, e_min: float, e_mfg: float, e_max: float) -> float:
    if choice == "e_min":
        return e_min
    if choice == "e_mfg":
        return e_mfg
    if choice == "midpoint":
        return 0.5 * (e_min + e_max)
    return float(choice)


def simulation_settings(config: ExperimentConfig, N: Optional[int] = None) -> SimulationSettings:
    return SimulationSettings(N=config.N if N is None else N, dt=config.dt, horizon=config.horizon,
                              burn_in=config.burn_in, n_runs=config.n_runs, seed=config.seed,
                              cost_stride=config.cost_stride, n_jobs=config.n_jobs,
                              record_stride=config.record_stride)


class PipelineStages:
    """Graph nodes; each writes its artifacts and returns a partial state update."""

    def __init__(self, config: ExperimentConfig, store: ArtifactStore):
        self.config = config
        self.store = store

    @_stage("setup")
    def setup(self, state: PipelineState):
        self.store.write_text("config.env", self.config.to_text())
        instance = self.config.build_instance()
        return {"instance": instance}, {"n_cells": instance.grid.n_cells,
                                        "coupling": instance.coupling.describe(),
                                        "offset": instance.lagrangian.offset}

    @_stage("mfg")
    def mfg(self, state: PipelineState):
        inst = state["instance"]
        eq = solve_mfg(inst.lagrangian, inst.coupling, n_jobs=self.config.n_jobs)
        summary = eq.summary()
        summary["max_F_maximizer"] = eq.maximum.maximizer.to_json_dict()
        self.store.write_json("mfg.json", summary)
        self.store.write_frame("mfg_profile.csv", _profile(inst.grid, u0=eq.u0, mu0=eq.mu0, alpha0=eq.alpha0))
        return {"equilibrium": eq}, eq.summary()

    @_stage("planner")
    def planner(self, state: PipelineState):
        inst, eq, cfg = state["instance"], state["equilibrium"], self.config
        sol = solve_planner(inst.lagrangian, inst.coupling, eq, seed=cfg.seed, n_jobs=cfg.n_jobs)
        summary = sol.summary()
        summary["fixed_points"] = [asdict(r) for r in sol.fixed_points]
        self.store.write_json("planner.json", summary)
        self.store.write_frame("planner_profile.csv",
                               _profile(inst.grid, u_tilde=sol.u_tilde, m_tilde=sol.m_tilde,
                                        alpha_tilde=sol.alpha_tilde))
        band = {"e_min": sol.e_min, "e_mfg": eq.e_mfg, "e_max": eq.e_max}
        if inst.coupling.is_constant() or eq.e_max - sol.e_min <= 1e-12:
            message = (f"empty payoff band: e_min={sol.e_min:.10g} e_max={eq.e_max:.10g}; "
                       "F is constant so every stationary payoff equals the MFG payoff")
            logger.warning(message)
            error = {"stage": "planner", "type": EmptyPayoffBand.__name__, "message": message}
            return {"planner": sol, "status": "empty-band", "error": error}, {**sol.summary(), **band}
        e = resolve_e(cfg.e, sol.e_min, eq.e_mfg, eq.e_max)
        if not sol.e_min <= e < eq.e_max:
            raise ConfigurationError(f"e={e:.10g} outside [e_min, e_max) = [{sol.e_min:.10g}, {eq.e_max:.10g})")
        return {"planner": sol, "e": e}, {**sol.summary(), **band, "e": e}

    @_stage("penalized")
    def penalized(self, state: PipelineState):
        inst, eq, pl, cfg = state["instance"], state["equilibrium"], state["planner"], self.config
        e = state["e"]
        history = []
        if cfg.n_penalization == "auto":
            def evaluate_eN(sol):
                target = build_target(e, inst.lagrangian, inst.coupling, pl, sol)
                return compute_eN(cfg.N, target, inst.coupling).e_N

            choice = select_penalization(e, cfg.N, inst.lagrangian, inst.coupling, eq, evaluate_eN,
                                         margin=cfg.margin, seed=cfg.seed, n_jobs=cfg.n_jobs)
            sol = choice.solution
            history = [asdict(step) for step in choice.history]
            ladder = pd.DataFrame(history)
        else:
            solutions = solve_penalized_ladder(inst.lagrangian, inst.coupling, eq, n_max=float(cfg.n_penalization),
                                               seed=cfg.seed, n_jobs=cfg.n_jobs)
            sol = solutions[-1]
            ladder = pd.DataFrame({"n": [s.n for s in solutions], "F_value": [s.F_value for s in solutions],
                                   "kinetic": [s.kinetic for s in solutions]})
        self.store.write_frame("penalization_ladder.csv", ladder)
        summary = sol.summary()
        summary["drift_cap_exceeded"] = bool(sol.alpha_n.sup_norm > cfg.drift_cap)
        summary["drift_sup_norm"] = sol.alpha_n.sup_norm
        self.store.write_json("penalized.json", {**summary, "fixed_points": [asdict(r) for r in sol.fixed_points]})
        self.store.write_frame("penalized_profile.csv",
                               _profile(inst.grid, u_n=sol.u_n, m_n=sol.m_n, alpha_n=sol.alpha_n))
        return {"penalized": sol, "penalization_history": history}, summary

    @_stage("target")
    def target(self, state: PipelineState):
        inst, pl, pen, cfg = state["instance"], state["planner"], state["penalized"], self.config
        target = build_target(state["e"], inst.lagrangian, inst.coupling, pl, pen)
        payoff = compute_eN(cfg.N, target, inst.coupling)
        profile = value_profile(np.linspace(0.0, 1.0, PROFILE_POINTS), pl, pen, inst.lagrangian, inst.coupling,
                                n_jobs=cfg.n_jobs)
        payload = target.to_json_dict()
        payload.update({"N": cfg.N, "e_N": payoff.e_N, "expected_F": payoff.expected_F,
                        "expected_F_method": payoff.method})
        self.store.write_json("target.json", payload)
        self.store.write_frame("value_profile.csv", profile)
        self.store.write_frame("target_profile.csv",
                               _profile(inst.grid, m_hat=target.m_hat, phi=target.phi, alpha_hat=target.alpha_hat))
        summary = {"e": target.e, "lambda_star": target.lambda_star, "value": target.value, "e_N": payoff.e_N,
                   "bisections": target.iterations}
        return {"target": target, "e_N": payoff.e_N}, summary

    @_stage("calibrate")
    def calibrate(self, state: PipelineState):
        inst, target, pen, cfg = state["instance"], state["target"], state["penalized"], self.config
        if cfg.delta == "auto":
            calibration = calibrate_delta(cfg.epsilon, target, inst.lagrangian, n_samples=cfg.n_calibration,
                                          n_holdout=cfg.n_holdout, seed=cfg.seed, n_jobs=cfg.n_jobs)
            delta, payload = calibration.delta, calibration.to_json_dict()
        else:
            delta, payload = float(cfg.delta), {"delta": float(cfg.delta), "epsilon": cfg.epsilon, "heuristic": False}
        T = 0.1 * cfg.horizon if cfg.T == "auto" else float(cfg.T)
        params = TriggerParams(T, delta, target.alpha_hat, pen.alpha_n, target.m_hat, cfg.check_interval)
        if cfg.T == "auto":
            params, result = calibrate_grace_period(simulation_settings(cfg), params, inst.lagrangian,
                                                    inst.coupling)
            payload["p_trigger_at_T"] = result.p_trigger
        payload.update({"T": params.T, "T_auto": cfg.T == "auto", "check_interval": params.check_interval})
        self.store.write_json("calibration.json", payload)
        return {"calibration": payload, "trigger": params}, {"delta": delta, "T": params.T}

    @_stage("simulate")
    def simulate(self, state: PipelineState):
        inst, params, cfg = state["instance"], state["trigger"], self.config
        result = estimate_payoffs(simulation_settings(cfg), params, DeviationPolicy.conform(), inst.lagrangian,
                                  inst.coupling)
        est = result.estimates[0]
        e_N = state["e_N"]
        means = np.array([x.mean for x in result.estimates])
        summary = {"mean": est.mean, "stderr": est.stderr, "p_trigger": result.p_trigger, "e_N": e_N,
                   "player_mean_spread": float(means.max() - means.min()),
                   "within_budget": bool(abs(est.mean - e_N) <= 3.0 * est.stderr + DISCRETIZATION_BUDGET)}
        self.store.write_frame("simulate_runs.csv", result.runs)
        self.store.write_records("simulate_runs.jsonl", result.runs[RUN_RECORD_COLUMNS])
        self.store.write_json("simulate.json", summary)
        if result.path is not None:
            write_path_csv(result.path, self.store.path("path_run0.csv"))
            self.store.register("path_run0.csv")
        return {"simulation": summary}, summary

    @_stage("deviate")
    def deviate(self, state: PipelineState):
        inst, eq, pl, params, cfg = (state["instance"], state["equilibrium"], state["planner"], state["trigger"],
                                     self.config)
        policies = {
            "conform": DeviationPolicy.conform(),
            "selfish": DeviationPolicy.selfish(eq.alpha0),
            "lazy": DeviationPolicy.lazy(inst.grid),
            "planner": DeviationPolicy.planner(pl.alpha_tilde),
        }
        results = run_deviations(simulation_settings(cfg), params, policies, inst.lagrangian, inst.coupling)
        table = deviation_table(results, policies, params, state["e_N"], cfg.epsilon)
        self.store.write_frame("deviation.csv", table)
        self.store.write_records("deviation_runs.jsonl", deviation_runs(results))
        summary = {"passed": bool(table["passed"].all()), "resists": bool(table["resists"].all()),
                   "failed_policies": table.loc[~table["resists"], "policy"].unique().tolist()}
        return {"deviation": table}, summary

    @_stage("sweep")
    def sweep(self, state: PipelineState):
        inst, cfg = state["instance"], self.config
        params = state.get("trigger")
        simulate = cfg.simulate_sweep and params is not None
        table = sweep_N(simulation_settings(cfg), params, state["target"], inst.coupling, inst.lagrangian,
                        cfg.n_sweep, simulate=simulate)
        self.store.write_frame("sweep_n.csv", table)
        return {"sweep": table}, {"N": table["N"].tolist(), "gap": table["gap"].tolist()}

    def finalize(self, state: PipelineState) -> dict:
        status = state.get("status", "running")
        if status == "running":
            status = "ok"
        elif state.get("error", {}).get("type") == "EmptyPayoffBand":
            status = "empty-band"
        self.store.write_json("summary.json", {"status": status, "stages": state.get("stages_done", []),
                                               "error": state.get("error"), "results": state.get("summary", {})})
        report = render_report({**state, "status": status, "artifacts": list(self.store.files)})
        self.store.write_text("report.md", report)
        self.store.write_manifest(status)
        logger.info(f"pipeline finished with status '{status}'")
        return {"status": status, "report": report, "artifacts": list(self.store.files)}


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def render_report(state: PipelineState) -> str:
    lines = ["# Run report", "", f"Status: **{state.get('status')}**", ""]
    error = state.get("error")
    if error:
        lines += [f"Stopped in stage `{error['stage']}`: {error['type']}: {error['message']}", ""]
    for stage, summary in state.get("summary", {}).items():
        lines += [f"## {stage}", "", "| quantity | value |", "|---|---|"]
        for key, value in summary.items():
            if isinstance(value, (list, dict)):
                continue
            lines.append(f"| {key} | {_format(value)} |")
        lines.append("")
    lines += ["## Artifacts", ""]
    lines += [f"- `{name}`" for name in state.get("artifacts", [])]
    return "\n".join(lines).rstrip() + "\n"


class WorkflowManager:
    def __init__(self, config: ExperimentConfig, stages: Optional[Sequence[str]] = None,
                 output_dir: Optional[str] = None):
        unknown = set(stages or []) - set(STAGES)
        if unknown:
            raise ConfigurationError(f"unknown stages {sorted(unknown)}")
        self.config = config
        self.stages = [s for s in STAGES if stages is None or s in stages]
        self.store = ArtifactStore(output_dir or config.output_dir)
        self.nodes = PipelineStages(config, self.store)

    def create_workflow(self) -> StateGraph:
        """Create and configure the stage graph; a failed stage routes straight to finalize."""
        workflow = StateGraph(PipelineState)
        order = ["setup"] + self.stages
        for name in order:
            workflow.add_node(NODE_NAMES[name], getattr(self.nodes, name))
        workflow.add_node(NODE_NAMES["finalize"], self.nodes.finalize)

        for current, nxt in zip(order, order[1:] + ["finalize"]):
            workflow.add_conditional_edges(
                NODE_NAMES[current],
                _route,
                {"continue": NODE_NAMES[nxt], "halt": NODE_NAMES["finalize"]},
            )
        workflow.add_edge(NODE_NAMES["finalize"], END)
        workflow.set_entry_point(NODE_NAMES["setup"])
        return workflow

    def returnGraph(self):
        return self.create_workflow().compile()

    def run(self) -> dict:
        app = self.returnGraph()
        return app.invoke({"config": self.config, "status": "running", "stages_done": [], "summary": {}})


def _route(state: PipelineState) -> str:
    return "continue" if state.get("status") == "running" else "halt"


def exit_code(state: dict) -> int:
    if state.get("status") == "ok":
        return 0
    if state.get("error", {}).get("type") == "ConfigurationError":
        return 2
    return 1


def run_pipeline(config: ExperimentConfig, command: str = "pipeline", output_dir: Optional[str] = None) -> dict:
    if command not in COMMAND_STAGES:
        raise ConfigurationError(f"unknown command '{command}'")
    stages = list(COMMAND_STAGES[command])
    if command == "sweep-n" and config.simulate_sweep:
        stages.append("calibrate")
    return WorkflowManager(config, stages, output_dir).run()
