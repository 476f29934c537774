import json

import numpy as np
import pandas as pd
import pytest

import cli
from backend.harness.artifact_store import ArtifactStore, to_plain, verify_manifest
from backend.harness.ExperimentConfig import OUTPUT_DIR_ENV, ExperimentConfig, build_coupling, build_potential
from backend.harness.selftest import selftest
from backend.harness.WorkflowManager import (
    COMMAND_STAGES,
    WorkflowManager,
    exit_code,
    resolve_e,
    run_pipeline,
)
from backend.torus_core import ConfigurationError, ProbabilityGrid, TorusGrid


def small_config(tmp_path, **overrides):
    base = dict(n_cells=32, N=8, output_dir=str(tmp_path))
    base.update(overrides)
    return ExperimentConfig(**base)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def test_config_text_round_trip(tmp_path):
    config = small_config(tmp_path, e=0.25, T="auto", offset=0.1, n_sweep=[4, 8], simulate_sweep=True)
    text = config.to_text()
    assert "N=8" in text and "N_SWEEP=4,8" in text
    assert ExperimentConfig.from_text(text) == config


def test_config_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("PRESET=flat\nN=4\nT=auto\n", encoding="utf-8")
    config = ExperimentConfig.from_file(str(path))
    assert config.n_cells == 64 and config.coupling == "constant"
    assert config.N == 4 and config.T == "auto"


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert ExperimentConfig().output_dir == str(tmp_path)


@pytest.mark.parametrize("data", [
    {"n_cells": 4},
    {"dt": 0.1},
    {"n_sweep": "16,8"},
    {"burn_in": 3000.0},
    {"preset": "nope"},
    {"T": -1.0},
    {"e": "halfway"},
    {"unknown_key": 1},
])
def test_config_validation(data):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(data)


def test_preset_values_can_be_overridden():
    config = ExperimentConfig.load({"preset": "strong-coupling", "n_cells": 64})
    assert config.n_cells == 64
    assert config.coupling == "conv:1.0:0,1"


def test_build_potential_from_coefficients():
    grid = TorusGrid(16)
    V = build_potential("0,0,1", grid)
    assert np.allclose(V.values, np.sin(2 * np.pi * grid.nodes), atol=1e-15)
    assert np.allclose(build_potential("half-cos", grid).values, 0.5 * np.cos(2 * np.pi * grid.nodes), atol=1e-15)


def test_build_coupling_terms():
    grid = TorusGrid(32)
    conv = build_coupling("conv-cos", grid)
    assert conv.offset == 0.0
    assert conv.value(ProbabilityGrid.point_mass(grid, 3)) == pytest.approx(0.5, abs=1e-14)

    constant = build_coupling("const:0.3", grid)
    assert constant.is_constant()
    assert constant.value(ProbabilityGrid.uniform(grid)) == pytest.approx(0.3)

    shifted = build_coupling("linear:0,1,0+const:0.2", grid)
    plain = build_coupling("linear-cos", grid)
    assert shifted.offset == pytest.approx(plain.offset + 0.2)
    assert build_coupling("linear-cos", grid, offset=2.0).offset == 2.0


@pytest.mark.parametrize("spec", ["foo:1", "conv:abc:0,1", "linear:1,x"])
def test_build_coupling_rejects_bad_terms(spec):
    with pytest.raises(ConfigurationError):
        build_coupling(spec, TorusGrid(16))


def test_resolve_e():
    assert resolve_e("e_min", 1.0, 2.0, 4.0) == 1.0
    assert resolve_e("e_mfg", 1.0, 2.0, 4.0) == 2.0
    assert resolve_e("midpoint", 1.0, 2.0, 4.0) == 2.5
    assert resolve_e(3.0, 1.0, 2.0, 4.0) == 3.0


def test_to_plain_handles_numpy_and_infinity():
    plain = to_plain({"a": np.float64(1.5), "b": np.array([1, 2]), "c": float("inf"), "d": np.bool_(True)})
    assert plain == {"a": 1.5, "b": [1, 2], "c": "inf", "d": True}
    json.dumps(plain)


def test_manifest_detects_tampering(tmp_path):
    store = ArtifactStore(str(tmp_path))
    store.write_json("a.json", {"x": 1})
    store.write_text("b.txt", "hello\n")
    store.write_manifest()
    assert verify_manifest(str(tmp_path)) == []
    (tmp_path / "b.txt").write_text("changed\n", encoding="utf-8")
    (tmp_path / "a.json").unlink()
    assert sorted(verify_manifest(str(tmp_path))) == ["a.json", "b.txt"]


def test_unknown_stage_or_command(tmp_path):
    with pytest.raises(ConfigurationError):
        WorkflowManager(small_config(tmp_path), stages=["bogus"])
    with pytest.raises(ConfigurationError):
        run_pipeline(small_config(tmp_path), "bogus")


def test_command_prefixes():
    assert COMMAND_STAGES["mfg"] == ["mfg"]
    assert COMMAND_STAGES["deviate"][-1] == "deviate" and "simulate" not in COMMAND_STAGES["deviate"]
    assert COMMAND_STAGES["sweep-n"] == ["mfg", "planner", "penalized", "target", "sweep"]


def test_mfg_run_writes_artifacts(tmp_path):
    state = run_pipeline(small_config(tmp_path), "mfg")
    assert state["status"] == "ok" and exit_code(state) == 0
    assert state["stages_done"] == ["setup", "mfg"]
    for name in ("config.env", "mfg.json", "mfg_profile.csv", "summary.json", "report.md", "manifest.json"):
        assert (tmp_path / name).exists()

    mfg = read_json(tmp_path / "mfg.json")
    assert mfg["e_max"] == pytest.approx(-mfg["lambda0"] + 0.5, abs=1e-10)
    assert "Status: **ok**" in (tmp_path / "report.md").read_text(encoding="utf-8")
    assert verify_manifest(str(tmp_path)) == []

    with open(tmp_path / "mfg_profile.csv", "a", encoding="utf-8") as fh:
        fh.write("0,0,0,0\n")
    assert verify_manifest(str(tmp_path)) == ["mfg_profile.csv"]


def test_flat_instance_has_empty_band(tmp_path):
    state = run_pipeline(ExperimentConfig(preset="flat", output_dir=str(tmp_path)), "pipeline")
    assert state["status"] == "empty-band"
    assert exit_code(state) == 1
    assert state["stages_done"] == ["setup", "mfg", "planner"]
    summary = read_json(tmp_path / "summary.json")
    assert summary["status"] == "empty-band"
    assert summary["error"]["type"] == "EmptyPayoffBand"
    assert summary["results"]["planner"]["e_min"] == pytest.approx(summary["results"]["planner"]["e_max"])
    assert read_json(tmp_path / "manifest.json")["status"] == "empty-band"
    assert verify_manifest(str(tmp_path)) == []


def test_payoff_outside_band_is_a_configuration_error(tmp_path):
    state = run_pipeline(small_config(tmp_path, e=100.0), "planner")
    assert state["status"] == "failed"
    assert state["error"]["stage"] == "planner"
    assert exit_code(state) == 2


def test_target_run_is_byte_identical(tmp_path):
    config = small_config(tmp_path, n_penalization=8.0, e="e_mfg")
    first = run_pipeline(config, "target", output_dir=str(tmp_path / "a"))
    second = run_pipeline(config, "target", output_dir=str(tmp_path / "b"))
    assert first["status"] == second["status"] == "ok"
    assert read_json(tmp_path / "a" / "manifest.json") == read_json(tmp_path / "b" / "manifest.json")

    target = read_json(tmp_path / "a" / "target.json")
    assert abs(target["value"] - target["e"]) <= 1e-5
    assert target["e_N"] > target["value"]


def test_selftest_passes_and_is_deterministic():
    first = selftest()
    assert first.passed, first.summary()
    assert first.summary() == selftest().summary()


def test_selftest_detects_corruption():
    report = selftest(corrupt="solver-tolerance")
    assert not report.passed
    assert "hjb-eigen-agreement" in report.failed
    with pytest.raises(ValueError):
        selftest(corrupt="nothing")


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["mfg", "--n-cells", "32", "--output-dir", str(tmp_path / "ok")]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"

    assert cli.main(["mfg", "--n-cells", "4", "--output-dir", str(tmp_path / "bad")]) == 2
    assert cli.main(["mfg", "--config", str(tmp_path / "missing.env")]) == 2
    assert cli.main(["planner", "--preset", "flat", "--output-dir", str(tmp_path / "flat")]) == 1


def test_cli_config_file_with_override(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(small_config(tmp_path / "from-file").to_text(), encoding="utf-8")
    args = cli.build_parser().parse_args(["penalized", "--config", str(path), "--n", "4", "--N", "16"])
    config = cli.load_config(args)
    assert config.n_cells == 32
    assert config.n_penalization == 4.0
    assert config.N == 16


def test_fixed_penalization_writes_ladder(tmp_path):
    state = run_pipeline(small_config(tmp_path, n_penalization=8.0), "penalized")
    assert state["status"] == "ok"
    ladder = pd.read_csv(tmp_path / "penalization_ladder.csv")
    assert list(ladder.columns) == ["n", "F_value", "kinetic"]
    assert ladder["n"].tolist() == [1.0, 2.0, 4.0, 8.0]
    listed = [entry["path"] for entry in read_json(tmp_path / "manifest.json")["artifacts"]]
    assert "penalization_ladder.csv" in listed


@pytest.mark.slow
def test_selected_penalization_ladder_keeps_history(tmp_path):
    state = run_pipeline(small_config(tmp_path), "penalized")
    assert state["status"] == "ok"
    ladder = pd.read_csv(tmp_path / "penalization_ladder.csv")
    assert {"n", "F_value", "kinetic", "e_N", "punishment", "satisfied"} <= set(ladder.columns)
    assert ladder["satisfied"].iloc[-1]


def test_simulate_writes_run_records(tmp_path):
    config = small_config(tmp_path, n_penalization=8.0, e="e_mfg", T=0.5, delta=0.1, dt=1e-2, horizon=2.0,
                          burn_in=0.0, n_runs=2)
    state = run_pipeline(config, "simulate")
    assert state["status"] == "ok"
    with open(tmp_path / "simulate_runs.jsonl", "r", encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == 2 * 8
    assert all(set(record) == {"run", "player", "payoff", "theta"} for record in records)
    assert sorted({record["run"] for record in records}) == [0, 1]
    listed = [entry["path"] for entry in read_json(tmp_path / "manifest.json")["artifacts"]]
    assert "simulate_runs.jsonl" in listed
    assert verify_manifest(str(tmp_path)) == []
