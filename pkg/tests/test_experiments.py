import json

import numpy as np
import pytest
import yaml

from aoinet.cli import main
from aoinet.experiments import (
    METRICS_HEADER,
    ConfigError,
    ExperimentSpec,
    apply_axis,
    load_config,
    metrics_from_trace,
    preset_fig,
    read_metrics,
    read_trace,
    run_experiment,
    sem,
    summarize,
    tune_baseline,
)
from aoinet.gnn import GnnConfig, build_networks, save_networks
from aoinet.scenario import MissionConfig

SMALL = {"mission": {"n_agents": 4, "n_windows": 20}}


def test_sem():
    assert sem([1.0, 2.0, 3.0, 4.0]) == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert sem([5.0]) == 0.0


def test_single_episode_flags_sem():
    row = summarize(0.5, "x", [{"mean_aoi": 3.0, "mean_velvar": 0.0, "flags": []}], 0)
    assert row["flags"] == "sem_undefined" and row["sem_aoi"] == 0.0


def test_load_config_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({
        "mission": {"n_agents": 6, "radio": {"noise_dbm": -60.0}},
        "gnn": {"receptive_field": 2},
        "experiment": {"episodes": 3, "policies": ["flood(0.2)"]},
    }))
    spec = load_config(path)
    assert spec.mission.n_agents == 6 and spec.mission.radio.noise_dbm == -60.0
    assert spec.gnn.receptive_field == 2 and spec.episodes == 3


@pytest.mark.parametrize("doc", [
    {"mission": {"n_agent": 3}},
    {"missions": {}},
    {"mission": {"task": "dance"}},
    {"experiment": {"episodes": 0}},
    {"experiment": {"sweep_axis": "colour", "sweep_values": [1]}},
    {"experiment": {"sweep_axis": "n_agents"}},
])
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        load_config(doc)


def test_apply_axis():
    m, g = MissionConfig(), GnnConfig()
    assert apply_axis(m, g, "receptive_field", 3)[1].receptive_field == 3
    assert apply_axis(m, g, "power_ratio", 0.5)[0].comm_range_m == pytest.approx(500.0)
    assert apply_axis(m, g, "n_agents", 10)[0].side == pytest.approx(500.0)
    assert apply_axis(m, g, "velocity_ratio", 0.05)[0].vmax == pytest.approx(1.0)


def test_power_axis_keeps_placement():
    from aoinet.protocol import episode_rngs
    from aoinet.scenario import init_positions

    a = apply_axis(MissionConfig(), GnnConfig(), "power_ratio", 1.0)[0]
    b = apply_axis(MissionConfig(), GnnConfig(), "power_ratio", 0.125)[0]
    pa = init_positions(a, episode_rngs(3, 40)[0])[0]
    pb = init_positions(b, episode_rngs(3, 40)[0])[0]
    assert np.array_equal(pa, pb)


def test_run_experiment_writes_metrics_and_traces(tmp_path):
    spec = load_config({**SMALL, "experiment": {
        "policies": ["roundrobin", "flood(0.3)"], "episodes": 2, "sweep_axis": "power_ratio",
        "sweep_values": [0.25, 1.0], "out_dir": str(tmp_path), "save_traces": True}})
    rows = run_experiment(spec)
    assert len(rows) == 4
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0].startswith("# format=")
    assert text[1].split(",") == METRICS_HEADER
    back = read_metrics(tmp_path / "metrics.csv")
    assert float(back[0]["mean_aoi"]) == rows[0]["mean_aoi"]
    traces = sorted(tmp_path.glob("traces/*/*/*.jsonl"))
    assert len(traces) == 8
    recs = read_trace(traces[0])
    assert recs[0]["kind"] == "header" and recs[-1]["kind"] == "metrics"
    assert metrics_from_trace(recs)["mean_aoi"] == recs[-1]["mean_aoi"]
    assert (tmp_path / "experiment.yaml").exists()


def test_tune_baseline_prefers_smaller_p_on_ties():
    m = MissionConfig(n_agents=3, n_windows=5)
    best, table = tune_baseline("flood", m, episodes=1, grid=[0.0, 0.0001])
    assert best == 0.0 and len(table) == 2


def test_preset_specs():
    for name in ("receptive_field", "power", "teamsize", "flocking"):
        spec = preset_fig(name)
        assert spec.sweep_axis is not None and len(spec.sweep_values) >= 4
    assert preset_fig("power").sweep_values == [0.125, 0.25, 0.5, 1.0]
    with pytest.raises(ValueError):
        preset_fig("fig9")


def test_missing_checkpoint_skips_gnn(tmp_path):
    spec = load_config({**SMALL, "experiment": {"policies": ["gnn(nowhere.json)", "silent"],
                                                  "episodes": 1, "out_dir": str(tmp_path)}})
    rows = run_experiment(spec)
    assert [r["policy"] for r in rows] == ["silent"]


def write_config(tmp_path, extra=None):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **(extra or {})}))
    return str(path)


def test_cli_simulate_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path)
    for out in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--policy", "flood(0.4)", "--episodes", "2",
                     "--seed", "7", "--out", str(tmp_path / out)]) == 0
    ta = sorted((tmp_path / "a").glob("traces/**/*.jsonl"))
    tb = sorted((tmp_path / "b").glob("traces/**/*.jsonl"))
    assert len(ta) == 2
    assert [p.read_bytes() for p in ta] == [p.read_bytes() for p in tb]
    assert "flood(0.4)" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mission: {n_agents: 3, warp: 9}\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_sweep_requires_preset_or_config(capsys):
    assert main(["sweep"]) == 2


def test_cli_train_and_evaluate(tmp_path, capsys):
    cfg = write_config(tmp_path, {"gnn": {"receptive_field": 1, "hidden": 8, "mlp_layers": 2},
                                  "ppo": {"eval_episodes": 1, "batch_size": 16}})
    assert main(["train", "--config", cfg, "--budget", "160", "--seed", "1", "--out", str(tmp_path / "m")]) == 0
    ck = tmp_path / "m" / "checkpoint.json"
    assert json.loads(ck.read_text())["meta"]["observations"] == 160
    curve = (tmp_path / "m" / "learning_curve.csv").read_text().splitlines()
    assert curve[0].startswith("# format=") and len(curve) == 5
    assert main(["evaluate", "--checkpoint", str(ck), "--config", cfg, "--episodes", "1",
                 "--out", str(tmp_path / "ev")]) == 0
    assert "gnn(" in (tmp_path / "ev" / "metrics.csv").read_text()


def test_cli_tune(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["tune", "mst", "--config", cfg, "--episodes", "1", "--out", str(tmp_path)]) == 0
    assert "best p" in capsys.readouterr().out
    assert len(read_metrics(tmp_path / "tune_mst.csv")) == 10


def test_gnn_checkpoint_in_sweep(tmp_path):
    cfg = GnnConfig(receptive_field=1, hidden=4, mlp_layers=2)
    _, ps, _, vs = build_networks(cfg, 0)
    for k in (1, 2):
        (tmp_path / f"rf{k}").mkdir()
        save_networks(tmp_path / f"rf{k}" / "checkpoint.json", cfg, ps, vs)
    spec = load_config({**SMALL, "experiment": {
        "policies": [f"gnn({tmp_path}/rf{{value}}/checkpoint.json)"], "episodes": 1,
        "sweep_axis": "receptive_field", "sweep_values": [1, 2, 3], "out_dir": str(tmp_path / "out")}})
    rows = run_experiment(spec)
    assert [r["sweep_value"] for r in rows] == [1, 2]


def test_spec_defaults():
    spec = ExperimentSpec()
    assert spec.episodes == 100 and spec.mode == "simulate"
