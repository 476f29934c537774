import numpy as np
import pandas as pd
import pytest

from backend.mfg_equilibrium import solve_mfg
from backend.nplayer_sim.DeviationSuite import (
    DETECTION_RATE,
    deviation_runs,
    deviation_suite,
    deviation_table,
    punishment_marginals,
    run_deviations,
    sweep_N,
)
from backend.nplayer_sim.Simulator import (
    PATH_COLUMNS,
    calibrate_grace_period,
    current_drift,
    estimate_payoffs,
    read_path_csv,
    step,
    trigger_time_from_path,
    write_path_csv,
)
from backend.nplayer_sim.State import (
    DeviationPolicy,
    NoiseStreams,
    PathState,
    SimulationSettings,
    TriggerParams,
)
from backend.social_planner import select_penalization, solve_planner
from backend.target_construction import build_target, compute_eN
from backend.torus_core import GridDrift, ProbabilityGrid, wasserstein1_circle
from tests.conftest import cos_convolution, half_cos_lagrangian


@pytest.fixture(scope="module")
def params(target, penalized):
    return TriggerParams(T=0.5, delta=0.1, conform=target.alpha_hat, punish=penalized.alpha_n,
                         reference=target.m_hat)


def short_settings(**overrides):
    base = dict(N=3, dt=1e-2, horizon=2.0, burn_in=0.0, n_runs=4, seed=7, cost_stride=1)
    base.update(overrides)
    return SimulationSettings(**base)


@pytest.mark.parametrize("overrides", [{"dt": 0.02}, {"dt": 0.0}, {"N": 1}, {"burn_in": 2.0}])
def test_settings_validation(overrides):
    with pytest.raises(ValueError):
        short_settings(**overrides)


def test_trigger_params_need_positive_values(params):
    with pytest.raises(ValueError):
        TriggerParams(0.0, params.delta, params.conform, params.punish, params.reference)
    with pytest.raises(ValueError):
        TriggerParams(params.T, -1.0, params.conform, params.punish, params.reference)


def test_custom_policy_needs_a_drift():
    with pytest.raises(ValueError):
        DeviationPolicy("custom")


def test_step_rejects_a_changed_dt(params):
    noise = NoiseStreams(np.random.SeedSequence(0).spawn(1), 3)
    state = PathState.start(params.grid, np.full((1, 3), 0.5), np.array([0]), noise, 1e-2)
    with pytest.raises(ValueError):
        step(state, params, DeviationPolicy.conform(), dt=0.02)
    with pytest.raises(ValueError):
        step(state, params, DeviationPolicy.conform(), dt=5e-3)


def test_drift_switches_to_punishment_after_trigger(params, grid):
    state = PathState.start(grid, np.array([[0.1, 0.4, 0.8]]), np.array([0]), None, 1e-2)
    lazy = DeviationPolicy.lazy(grid)
    before = current_drift(state, params, lazy)
    assert before[0, 0] == 0.0
    assert np.array_equal(before[0, 1:], params.conform.interpolate(state.positions[0, 1:]))

    state.theta[:] = 0.0
    state.steps = 1
    after = current_drift(state, params, lazy)
    assert after[0, 0] == 0.0
    assert np.array_equal(after[0, 1:], params.punish.interpolate(state.positions[0, 1:]))


def test_no_trigger_before_grace_period_ends(params, lagrangian, coupling):
    late = TriggerParams(5.0, 1e-9, params.conform, params.punish, params.reference)
    result = estimate_payoffs(short_settings(), late, DeviationPolicy.conform(), lagrangian, coupling)
    assert np.all(np.isinf(result.runs["theta"]))
    assert result.p_trigger == 0.0


def test_tiny_tolerance_triggers_at_grace_period(params, lagrangian, coupling):
    eager = TriggerParams(0.5, 1e-9, params.conform, params.punish, params.reference, check_interval=0.1)
    result = estimate_payoffs(short_settings(), eager, DeviationPolicy.conform(), lagrangian, coupling)
    assert np.allclose(result.runs["theta"], 0.5, atol=1e-12)
    assert result.p_trigger == 1.0


def test_checks_count_from_the_grace_period(params, lagrangian, coupling):
    offset = TriggerParams(0.55, 1e-9, params.conform, params.punish, params.reference, check_interval=0.1)
    result = estimate_payoffs(short_settings(), offset, DeviationPolicy.conform(), lagrangian, coupling)
    assert np.allclose(result.runs["theta"], 0.55, atol=1e-12)


def test_recorded_path_replays_the_trigger(params, lagrangian, coupling, tmp_path):
    settings = short_settings(n_runs=1, record_stride=1)
    tight = TriggerParams(0.2, 0.02, params.conform, params.punish, params.reference)
    result = estimate_payoffs(settings, tight, DeviationPolicy.conform(), lagrangian, coupling)
    assert list(result.path.columns) == PATH_COLUMNS
    assert len(result.path) == settings.n_steps * settings.N

    target = tmp_path / "path_run0.csv"
    write_path_csv(result.path, target)
    replayed = trigger_time_from_path(read_path_csv(target), tight, settings.dt)
    assert replayed == result.runs["theta"].iloc[0]


def test_replay_needs_every_step(params):
    sparse = pd.DataFrame({"t": [0.02, 0.02], "player": [0, 1], "position": [0.1, 0.2]})
    with pytest.raises(ValueError):
        trigger_time_from_path(sparse, params, 1e-2)


def test_simulation_is_deterministic(params, lagrangian, coupling):
    first = estimate_payoffs(short_settings(), params, DeviationPolicy.conform(), lagrangian, coupling)
    second = estimate_payoffs(short_settings(), params, DeviationPolicy.conform(), lagrangian, coupling)
    pd.testing.assert_frame_equal(first.runs, second.runs)


def test_worker_count_does_not_change_runs(params, lagrangian, coupling):
    serial = estimate_payoffs(short_settings(), params, DeviationPolicy.conform(), lagrangian, coupling)
    pooled = estimate_payoffs(short_settings(n_jobs=2), params, DeviationPolicy.conform(), lagrangian, coupling)
    pd.testing.assert_frame_equal(serial.runs, pooled.runs, check_exact=False, rtol=1e-12)


def test_deviation_suite_table(params, lagrangian, coupling, equilibrium, grid, target):
    policies = {"conform": DeviationPolicy.conform(), "selfish": DeviationPolicy.selfish(equilibrium.alpha0),
                "lazy": DeviationPolicy.lazy(grid)}
    e_N = compute_eN(3, target, coupling).e_N
    table = deviation_suite(short_settings(n_runs=2), params, policies, e_N, 0.05, lagrangian, coupling)
    assert len(table) == 3 + 2
    assert table["passed"].dtype == bool
    assert np.isnan(table.loc[table["policy"] == "conform", "w1_policy_measure"]).all()
    deviators = table[table["policy"] != "conform"]
    assert (deviators["player"] == 0).all()
    assert np.isinf(deviators["upper"]).all()
    assert table["trigger_ok"].dtype == bool
    assert (table["resists"] == (table["passed"] & table["trigger_ok"])).all()


def test_sweep_gap_shrinks_like_one_over_M(params, lagrangian, coupling, target):
    table = sweep_N(short_settings(), params, target, coupling, lagrangian, [4, 8, 16])
    assert list(table["N"]) == [4, 8, 16]
    assert np.all(np.diff(table["gap"]) < 0.0)
    assert np.ptp(table["gap_times_M"]) <= 1e-10
    with pytest.raises(ValueError):
        sweep_N(short_settings(), params, target, coupling, lagrangian, [16, 4])


def test_punishment_marginals_never_trigger(params, lagrangian, coupling, penalized):
    result = punishment_marginals(short_settings(n_runs=2), params, penalized.m_n, lagrangian, coupling)
    assert result.p_trigger == 0.0
    assert (result.runs["w1_occupation"] >= 0.0).all()


def test_grace_period_kept_when_nothing_triggers(params, lagrangian, coupling):
    loose = TriggerParams(0.5, 1.0, params.conform, params.punish, params.reference)
    chosen, result = calibrate_grace_period(short_settings(), loose, lagrangian, coupling)
    assert chosen.T == 0.5
    assert result.p_trigger == 0.0


def test_grace_period_doubles_up_to_horizon(params, lagrangian, coupling):
    eager = TriggerParams(0.5, 1e-9, params.conform, params.punish, params.reference)
    chosen, _ = calibrate_grace_period(short_settings(), eager, lagrangian, coupling)
    assert chosen.T == 2.0


def test_custom_policy_drift_is_used(params, lagrangian, coupling, grid):
    push = DeviationPolicy.custom(GridDrift.from_faces(grid, np.full(grid.n_cells, 1.0)))
    result = estimate_payoffs(short_settings(n_runs=2), params, push, lagrangian, coupling)
    assert len(result.estimates) == 3
    assert np.all(np.isfinite(result.runs["payoff"]))


@pytest.mark.slow
def test_conforming_payoff_matches_eN(target, penalized, lagrangian, coupling):
    settings = SimulationSettings(N=32, dt=1e-2, horizon=400.0, burn_in=40.0, n_runs=16, seed=0)
    params = TriggerParams(100.0, 0.1, target.alpha_hat, penalized.alpha_n, target.m_hat)
    result = estimate_payoffs(settings, params, DeviationPolicy.conform(), lagrangian, coupling)
    e_N = compute_eN(32, target, coupling).e_N
    est = result.estimates[0]
    assert abs(est.mean - e_N) <= 3.0 * est.stderr + 0.02


def test_deviation_runs_tag_every_record(params, lagrangian, coupling, grid):
    policies = {"conform": DeviationPolicy.conform(), "lazy": DeviationPolicy.lazy(grid)}
    results = run_deviations(short_settings(n_runs=2), params, policies, lagrangian, coupling)
    runs = deviation_runs(results)
    assert list(runs.columns) == ["policy", "run", "player", "payoff", "theta"]
    assert len(runs) == 2 * 2 * 3
    assert runs.groupby("policy").size().to_dict() == {"conform": 6, "lazy": 6}


def test_conformer_trigger_rate_is_a_false_alarm(params, lagrangian, coupling):
    eager = TriggerParams(0.5, 1e-9, params.conform, params.punish, params.reference)
    policies = {"conform": DeviationPolicy.conform()}
    results = run_deviations(short_settings(n_runs=2), eager, policies, lagrangian, coupling)
    table = deviation_table(results, policies, eager, 0.0, 0.05)
    assert not table["trigger_ok"].any()
    assert not table["resists"].any()


@pytest.mark.slow
def test_zero_drift_increments_scale_with_dt(grid):
    still = GridDrift.zero(grid)
    uniform = ProbabilityGrid.uniform(grid)
    params = TriggerParams(1e9, 1.0, still, still, uniform)
    noise = NoiseStreams(np.random.SeedSequence(11).spawn(1), 8)
    dt = 1e-3
    state = PathState.start(grid, np.linspace(0.0, 1.0, 8, endpoint=False)[None, :], np.array([0]), noise, dt)
    increments = np.empty((100000, 8))
    for k in range(increments.shape[0]):
        before = state.positions.copy()
        step(state, params, DeviationPolicy.conform())
        increments[k] = np.mod(state.positions - before + 0.5, 1.0)[0] - 0.5
    assert abs(np.mean(increments)) <= 1e-3
    assert np.var(increments) == pytest.approx(dt, rel=0.05)


@pytest.mark.slow
def test_conforming_occupations_settle_on_target(target, penalized, lagrangian, coupling, equilibrium):
    settings = SimulationSettings(N=4, dt=1e-2, horizon=400.0, burn_in=40.0, n_runs=4, seed=2)
    quiet = TriggerParams(1e4, 0.1, target.alpha_hat, penalized.alpha_n, target.m_hat)
    result = estimate_payoffs(settings, quiet, DeviationPolicy.conform(), lagrangian, coupling)
    assert result.p_trigger == 0.0
    assert result.runs["w1_occupation"].max() <= 0.05
    assert result.runs["running_cost"].min() >= -equilibrium.lambda0 - 0.05


@pytest.fixture(scope="module")
def detectable():
    """Strong attraction with e a third of the way up the band, so m^ sits visibly away from uniform."""
    lag = half_cos_lagrangian(64)
    coupling = cos_convolution(lag.grid, 1.0)
    eq = solve_mfg(lag, coupling)
    pl = solve_planner(lag, coupling, eq)
    e = pl.e_min + 0.35 * (eq.e_max - pl.e_min)

    def evaluate_eN(sol):
        return compute_eN(8, build_target(e, lag, coupling, pl, sol), coupling).e_N

    pen = select_penalization(e, 8, lag, coupling, eq, evaluate_eN, n_max=64).solution
    target = build_target(e, lag, coupling, pl, pen)
    return lag, coupling, eq, pen, target, compute_eN(8, target, coupling).e_N


@pytest.mark.slow
def test_deviations_are_caught_and_unprofitable(detectable):
    lag, coupling, eq, pen, target, e_N = detectable
    uniform = ProbabilityGrid.uniform(lag.grid)
    delta = 0.5 * min(wasserstein1_circle(uniform, target.m_hat), wasserstein1_circle(eq.mu0, target.m_hat))
    params = TriggerParams(50.0, delta, target.alpha_hat, pen.alpha_n, target.m_hat)
    settings = SimulationSettings(N=8, dt=5e-3, horizon=400.0, burn_in=100.0, n_runs=20, seed=4)
    policies = {"selfish": DeviationPolicy.selfish(eq.alpha0), "lazy": DeviationPolicy.lazy(lag.grid)}
    table = deviation_suite(settings, params, policies, e_N, 0.05, lag, coupling)

    for _, row in table.iterrows():
        assert row["mean"] >= e_N - 0.05 - 3.0 * row["stderr"], row["policy"]
        assert row["p_trigger"] >= DETECTION_RATE, row["policy"]
    assert table["resists"].all()

    punished = punishment_marginals(settings, params, pen.m_n, lag, coupling)
    assert punished.runs["w1_occupation"].max() <= 0.05
