import csv
import json

import numpy as np
import pytest

from unicorn_tsc.cli import EXIT_CONFIG, EXIT_OK, load_config, ConfigError, main
from unicorn_tsc.learn import TrainConfig, build_model, scenario_caps
from unicorn_tsc.netmodel import network_from_dict
from unicorn_tsc.scenarios import grid_network, grid_nodes, poisson_flows, toy_corridor, toy_grid
from unicorn_tsc.simcore import METRIC_COLUMNS, flows_from_dict
from unicorn_tsc.learn import Scenario


def write_scenario(tmp_path, name, net, flows):
    (tmp_path / f"{name}.net.json").write_text(json.dumps(net))
    (tmp_path / f"{name}.flows.json").write_text(json.dumps(flows))
    return {"name": name, "network": f"{name}.net.json", "flows": f"{name}.flows.json"}


def write_config(tmp_path, scenarios, **extra):
    doc = {"scenarios": scenarios, "sim": {"preset": "resco", "horizon_s": 150},
           "train": {"iterations": 2, "rollout_horizon_s": 60}, "eval_episodes": 3,
           "seed": 7, "out": "run"}
    doc.update(extra)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def grid_cfg(tmp_path):
    return write_config(tmp_path, [write_scenario(tmp_path, "grid", *toy_grid(horizon_s=150))])


def read_csv(path):
    return list(csv.reader(open(path)))


def test_validate(grid_cfg, capsys):
    assert main(["validate", "--config", str(grid_cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "regime=single" in out and "grid: tag=" in out


def test_config_errors_carry_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"scenarios": [}')
    assert main(["validate", "--config", str(bad)]) == EXIT_CONFIG
    assert "bad.json: line 1" in capsys.readouterr().err
    sc = write_scenario(tmp_path, "g", *toy_grid(horizon_s=150))
    with pytest.raises(ConfigError, match="multiple of decision_interval"):
        load_config(write_config(tmp_path, [sc], sim={"horizon_s": 155}))
    with pytest.raises(ConfigError, match=r"scenarios\[0\]: unknown keys"):
        load_config(write_config(tmp_path, [dict(sc, extra=1)]))
    with pytest.raises(ConfigError, match="at least one"):
        load_config(write_config(tmp_path, []))
    with pytest.raises(ConfigError, match="train: unknown"):
        load_config(write_config(tmp_path, [sc], train={"lr": 1}))


def test_train_then_eval_deterministic(tmp_path, grid_cfg):
    assert main(["train", "--config", str(grid_cfg)]) == EXIT_OK
    run = tmp_path / "run"
    assert (run / "model.bin").exists() and (run / "model.bin.manifest.json").exists()
    log = read_csv(run / "train_log.csv")
    assert log[0] == ["iter", "scenario", "mean_return", "L_p", "L_v", "L_e", "L_vae", "L_cont", "wall_s"]
    assert json.loads((run / "run.json").read_text())["regime"] == "single"
    # rerun: identical training CSV apart from wall time
    assert main(["train", "--config", str(grid_cfg), "--out", str(tmp_path / "run2")]) == EXIT_OK
    again = read_csv(tmp_path / "run2" / "train_log.csv")
    assert [r[:-1] for r in log] == [r[:-1] for r in again]

    ck = str(run / "model.bin")
    assert main(["eval", "--config", str(grid_cfg), "--checkpoint", ck]) == EXIT_OK
    first = (run / "metrics_unicorn.csv").read_bytes()
    assert main(["eval", "--config", str(grid_cfg), "--checkpoint", ck]) == EXIT_OK
    assert (run / "metrics_unicorn.csv").read_bytes() == first
    rows = read_csv(run / "metrics_unicorn.csv")
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [r[1] for r in rows[1:]] == ["7", "8", "9", "mean", "std"]
    ep = np.array([[float(x) for x in r[2:]] for r in rows[1:4]])
    mean = np.array([float(x) for x in rows[4][2:]])
    assert np.allclose(ep.mean(axis=0), mean, rtol=1e-12, atol=1e-12)


def test_eval_requires_compatible_checkpoint(tmp_path, grid_cfg, capsys):
    nd, fd = toy_corridor(horizon_s=150)
    sc = Scenario("c", network_from_dict(nd), flows_from_dict(fd))
    net = build_model([sc], 2, TrainConfig())  # catalog 2 vs config 4
    net.save(tmp_path / "other.bin")
    code = main(["eval", "--config", str(grid_cfg), "--checkpoint", str(tmp_path / "other.bin")])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "catalog_size" in err and "M_max" in err
    assert main(["eval", "--config", str(grid_cfg)]) == EXIT_CONFIG


def test_baselines_share_schema_and_diverge(tmp_path):
    nd, fd = toy_grid(total_veh_per_min=40, horizon_s=300)
    cfg = write_config(tmp_path, [write_scenario(tmp_path, "busy", nd, fd)],
                       sim={"horizon_s": 300})
    outs = {}
    for c in ("fixed", "greedy", "maxpressure"):
        assert main(["baseline", "--config", str(cfg), "--controller", c]) == EXIT_OK
        outs[c] = read_csv(tmp_path / "run" / f"metrics_{c}.csv")
        assert tuple(outs[c][0]) == METRIC_COLUMNS
    assert outs["greedy"] != outs["maxpressure"]


def test_fixed_on_empty_flows_is_zero(tmp_path):
    nd, _ = toy_grid(horizon_s=150)
    cfg = write_config(tmp_path, [write_scenario(tmp_path, "empty", nd, {"rates": [], "departures": []})])
    assert main(["baseline", "--config", str(cfg), "--controller", "fixed"]) == EXIT_OK
    rows = read_csv(tmp_path / "run" / "metrics_fixed.csv")
    for r in rows[1:]:
        assert all(float(x) == 0.0 for x in r[2:])


def test_joint_training_tagged_multiple(tmp_path):
    a = write_scenario(tmp_path, "grid", *toy_grid(horizon_s=150))
    b = write_scenario(tmp_path, "corr", *toy_corridor(horizon_s=150))
    (tmp_path / "registry.json").write_text(json.dumps({"scenarios": [a, b]}))
    cfg = write_config(tmp_path, "registry.json", train={"iterations": 1, "rollout_horizon_s": 30})
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    run = json.loads((tmp_path / "run" / "run.json").read_text())
    assert run["regime"] == "multiple" and run["scenarios"] == ["grid", "corr"]
    log = read_csv(tmp_path / "run" / "train_log.csv")
    assert {r[1] for r in log[1:]} == {"grid", "corr"}


def test_grid_4x4_eval(tmp_path):
    nodes = grid_nodes(4, 4)
    sc = write_scenario(tmp_path, "g44", grid_network(4, 4), poisson_flows(nodes, 30, 150))
    cfg = write_config(tmp_path, [sc], eval_episodes=1)
    scen = Scenario("g44", network_from_dict(grid_network(4, 4)),
                    flows_from_dict(poisson_flows(nodes, 30, 150)))
    assert len(scen.net.intersection_ids) == 16
    build_model([scen], 4, TrainConfig()).save(tmp_path / "m.bin")
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "m.bin")]) == EXIT_OK
    rows = read_csv(tmp_path / "run" / "metrics_unicorn.csv")
    assert len(rows) == 4


def test_parallel_workers_match_serial(tmp_path, grid_cfg, monkeypatch):
    assert main(["baseline", "--config", str(grid_cfg), "--controller", "greedy"]) == EXIT_OK
    serial = (tmp_path / "run" / "metrics_greedy.csv").read_bytes()
    monkeypatch.setenv("UNICORN_THREADS", "2")
    assert main(["baseline", "--config", str(grid_cfg), "--controller", "greedy",
                 "--out", str(tmp_path / "par")]) == EXIT_OK
    assert (tmp_path / "par" / "metrics_greedy.csv").read_bytes() == serial
