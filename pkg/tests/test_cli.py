import json
import os

import numpy as np
import pytest

from blochbellman import cli


def write_cfg(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    return np.genfromtxt(path, delimiter=",", names=True)


def sim_cfg(**over):
    cfg = {
        "seed": 7,
        "r0": [0.6, 0.0, 0.0],
        "horizon": 1.0,
        "dt": 2e-4,
        "policy": {"kind": "orthogonal_adaptive", "lam": 1.0},
    }
    cfg.update(over)
    return cfg


# ---------------------------------------------------------------- validation


def test_unknown_top_level_key_rejected(tmp_path):
    cfg = sim_cfg(typo_key=3)
    with pytest.raises(cli.ConfigError, match="typo_key"):
        cli.cmd_simulate(cfg, str(tmp_path))


def test_unknown_nested_key_rejected(tmp_path):
    cfg = sim_cfg(policy={"kind": "orthogonal_adaptive", "lam": 1.0, "angle": 2})
    with pytest.raises(cli.ConfigError, match="angle"):
        cli.cmd_simulate(cfg, str(tmp_path))


def test_missing_seed_rejected_for_stochastic(tmp_path):
    cfg = sim_cfg()
    del cfg["seed"]
    with pytest.raises(cli.ConfigError, match="seed"):
        cli.cmd_simulate(cfg, str(tmp_path))
    # hjb is deterministic and needs no seed
    hjb_cfg = {
        "problem": "measurement",
        "cost": {"kind": "purity_deficit"},
        "grid": {"mode": "radial", "t0": 0.2, "horizon": 0.2, "dx": 0.5},
        "channels": [{"direction": [0, 0, 1], "strength": 1.0}],
        "verify": False,
    }
    report = cli.cmd_hjb(hjb_cfg, str(tmp_path))
    assert report["passed"]


def test_seed_flag_overrides_config(tmp_path):
    cfg = sim_cfg()
    del cfg["seed"]
    path = write_cfg(tmp_path, "s.json", cfg)
    out = tmp_path / "out"
    code = cli.main(["simulate", "--config", str(path), "--seed", "5",
                     "--out", str(out), "--quiet"])
    assert code == 0
    assert json.loads((out / "report.json").read_text())["seed"] == 5


def test_non_finite_literal_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": 1, "lam": Infinity}')
    with pytest.raises(cli.ConfigError, match="non-finite"):
        cli.load_config(str(path))


def test_wrong_type_rejected(tmp_path):
    with pytest.raises(cli.ConfigError, match="number"):
        cli.cmd_generator_check({"seed": 1, "lam": {"oops": True}}, str(tmp_path))


def test_policy_parameter_combinations_rejected(tmp_path):
    bad = [
        {"kind": "no_measurement", "lam": 1.0},
        {"kind": "fixed_axis", "lam": 1.0},
        {"kind": "fixed_axis", "direction": [0, 0, 1]},
        {"kind": "fixed_axis", "direction": [0, 0, 0], "lam": 1.0},
        {"kind": "orthogonal_adaptive"},
        {"kind": "orthogonal_adaptive", "lam": 1.0, "direction": [1, 0, 0]},
    ]
    for block in bad:
        with pytest.raises(cli.ConfigError):
            cli.cmd_simulate(sim_cfg(policy=block), str(tmp_path))


def test_cost_parameter_combinations_rejected():
    with pytest.raises(cli.ConfigError, match="target"):
        cli._build_costs({"kind": "target_miss"})
    with pytest.raises(cli.ConfigError, match="target"):
        cli._build_costs({"kind": "purity_deficit", "target": [0, 0, 1]})


def test_generator_check_guards(tmp_path):
    base = {"seed": 1, "lam": 1.0}
    with pytest.raises(cli.ConfigError, match="even"):
        cli.cmd_generator_check(dict(base, n_traj=3), str(tmp_path))
    with pytest.raises(cli.ConfigError, match="unit ball"):
        cli.cmd_generator_check(dict(base, states=[[1.2, 0, 0]]), str(tmp_path))
    with pytest.raises(cli.ConfigError, match="direction"):
        cli.cmd_generator_check(dict(base, probe="orthogonal", direction=[0, 0, 1]),
                                str(tmp_path))


def _walk_objects(node):
    if isinstance(node, dict):
        if node.get("type") == "object":
            assert node.get("additionalProperties") is False
        for value in node.values():
            _walk_objects(value)
    elif isinstance(node, list):
        for value in node:
            _walk_objects(value)


def test_every_object_schema_rejects_unknown_keys():
    assert set(cli.SCHEMAS) == {"simulate", "ensemble", "generator-check",
                                "hjb", "purify-benchmark"}
    assert set(cli.COMMANDS) == set(cli.SCHEMAS)
    for schema in cli.SCHEMAS.values():
        _walk_objects(schema)


# ------------------------------------------------------------------ simulate


def test_simulate_orthogonal_csv_contract(tmp_path):
    report = cli.cmd_simulate(sim_cfg(), str(tmp_path))
    assert report["passed"]
    tab = read_csv(tmp_path / "trajectory.csv")
    assert tab.dtype.names == ("t", "x", "y", "z", "r2", "u1", "dy1", "w1")
    np.testing.assert_allclose(tab["r2"], tab["x"] ** 2 + tab["y"] ** 2 + tab["z"] ** 2,
                               atol=1e-15)
    # strength-1 channel stays on at every step (trailing row is padding)
    np.testing.assert_allclose(tab["u1"][:-1], 1.0)
    deficit = 1.0 - tab["r2"]
    slope = np.polyfit(tab["t"], np.log(deficit), 1)[0]
    assert abs(slope + 1.0) <= 1e-3


def test_simulate_no_measurement_constant(tmp_path):
    cfg = sim_cfg(policy={"kind": "no_measurement"}, r0=[0.2, -0.3, 0.4], dt=0.01)
    report = cli.cmd_simulate(cfg, str(tmp_path))
    assert report["passed"]
    tab = read_csv(tmp_path / "trajectory.csv")
    assert tab.dtype.names == ("t", "x", "y", "z", "r2")
    for name, ref in zip("xyz", cfg["r0"]):
        np.testing.assert_allclose(tab[name], ref, atol=0)


def test_simulate_fixed_axis_bookkeeping(tmp_path):
    lam = 0.8
    cfg = sim_cfg(r0=[0.1, 0.2, 0.3], dt=1e-3,
                  policy={"kind": "fixed_axis", "direction": [0, 0, 1], "lam": lam})
    report = cli.cmd_simulate(cfg, str(tmp_path))
    assert report["passed"]
    tab = read_csv(tmp_path / "trajectory.csv")
    dw = np.diff(tab["w1"])
    # two-point noise: every innovation increment is +-sqrt(dt)
    np.testing.assert_allclose(np.abs(dw), np.sqrt(1e-3), rtol=1e-12)
    # record increment = innovation + lam (n.r) dt with the pre-step state
    np.testing.assert_allclose(tab["dy1"][1:], dw + lam * tab["z"][:-1] * 1e-3,
                               atol=1e-15)


def test_simulate_rerun_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    cli.cmd_simulate(sim_cfg(dt=1e-3), str(a))
    cli.cmd_simulate(sim_cfg(dt=1e-3), str(b))
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    good = write_cfg(tmp_path, "good.json", sim_cfg(dt=1e-3))
    assert cli.main(["simulate", "--config", str(good),
                     "--out", str(tmp_path / "g"), "--quiet"]) == 0
    # Euler bias at dt = 0.01 pushes the slope check past its 1e-3 tolerance
    coarse = write_cfg(tmp_path, "coarse.json", sim_cfg(dt=0.01))
    capsys.readouterr()
    assert cli.main(["simulate", "--config", str(coarse),
                     "--out", str(tmp_path / "c"), "--quiet"]) == 1
    failures = json.loads(capsys.readouterr().err)["failures"]
    assert failures[0]["name"] == "log_deficit_slope"
    bad = write_cfg(tmp_path, "bad.json", sim_cfg(typo_key=1))
    capsys.readouterr()
    assert cli.main(["simulate", "--config", str(bad),
                     "--out", str(tmp_path / "b"), "--quiet"]) == 2
    assert "typo_key" in json.loads(capsys.readouterr().err)["error"]


# ------------------------------------------------------------------ ensemble


def ens_cfg(**over):
    cfg = {
        "seed": 11,
        "r0": [0.0, 0.0, 0.3],
        "horizon": 0.5,
        "dt": 0.01,
        "n_traj": 600,
        "policy": {"kind": "fixed_axis", "direction": [0, 0, 1], "lam": 1.0},
    }
    cfg.update(over)
    return cfg


def test_ensemble_long_format_and_checks(tmp_path):
    report = cli.cmd_ensemble(ens_cfg(), str(tmp_path))
    assert report["passed"]
    assert report["n_traj"] == 600
    names = [row["name"] for row in report["checks"]]
    assert "mean_deficit_nonincreasing" in names
    assert "measured_mean_conserved" in names
    tab = read_csv(tmp_path / "ensemble_stats.csv")
    assert len(tab) == 51 * 4
    first = tab[:4]
    # all trajectories share r0, so the t0 spread vanishes
    np.testing.assert_allclose(first["variance"], 0.0, atol=1e-28)
    z0 = first[3]
    assert abs(z0["mean"] - 0.3) < 1e-12


def test_ensemble_worker_count_invariance(tmp_path, monkeypatch):
    out = {}
    for workers in ("3", "1"):
        monkeypatch.setenv("BB_NUM_WORKERS", workers)
        d = tmp_path / f"w{workers}"
        d.mkdir()
        cli.cmd_ensemble(ens_cfg(), str(d))
        out[workers] = (d / "ensemble_stats.csv").read_bytes()
    assert out["1"] == out["3"]


def test_ensemble_functional_subset(tmp_path):
    report = cli.cmd_ensemble(ens_cfg(functionals=["purity_deficit", "z"]),
                              str(tmp_path))
    assert report["passed"]
    # conservation check degrades to a skip without all three components
    row = [r for r in report["checks"] if r["name"] == "measured_mean_conserved"][0]
    assert row["passed"] and "skipped" in row["detail"]
    tab = read_csv(tmp_path / "ensemble_stats.csv")
    assert len(tab) == 51 * 2


# ----------------------------------------------------------- generator-check


def test_generator_check_fixed_probe(tmp_path):
    cfg = {"seed": 3, "lam": 1.0, "n_traj": 20000, "h": 1e-3}
    report = cli.cmd_generator_check(cfg, str(tmp_path))
    assert report["passed"]
    names = [row["name"] for row in report["checks"]]
    assert "mc_within_tolerance" in names and "worked_point" in names
    assert "eigenstate_zero_1" in names and "eigenstate_zero_2" in names
    payload = json.loads((tmp_path / "generator_check.json").read_text())
    assert len(payload["rows"]) == 4
    for row in payload["rows"]:
        assert row["passed"]
        np.testing.assert_allclose(row["closed"],
                                   row["closed_drift"] + row["closed_ito"],
                                   atol=1e-15)
    worked = payload["rows"][0]
    np.testing.assert_allclose(worked["closed"], -0.64, atol=1e-14)


def test_generator_check_orthogonal_probe(tmp_path):
    cfg = {"seed": 5, "lam": 1.3, "probe": "orthogonal", "n_traj": 4000,
           "states": [[0.5, 0.0, 0.0], [0.0, 0.2, 0.1], [0.0, 0.0, 0.0]]}
    report = cli.cmd_generator_check(cfg, str(tmp_path))
    assert report["passed"]
    payload = json.loads((tmp_path / "generator_check.json").read_text())
    lam2 = 1.3 ** 2
    for row in payload["rows"]:
        r2 = float(np.dot(row["state"], row["state"]))
        np.testing.assert_allclose(row["closed"], -lam2 * (1.0 - r2), atol=1e-10)


# ----------------------------------------------------------------------- hjb


def hjb_meas_cfg(**over):
    cfg = {
        "problem": "measurement",
        "cost": {"kind": "purity_deficit"},
        "grid": {"mode": "radial", "horizon": 1.0, "dx": 0.02},
        "channels": [{"direction": [0, 0, 1], "strength": 1.0}],
    }
    cfg.update(over)
    return cfg


def test_hjb_measurement_radial_csv(tmp_path):
    report = cli.cmd_hjb(hjb_meas_cfg(), str(tmp_path))
    assert report["passed"]
    names = [row["name"] for row in report["checks"]]
    assert names == ["terminal_matches_bequest", "values_finite",
                     "residual_radial_transport", "residual_generator_backward"]
    tab = read_csv(tmp_path / "hjb_values.csv")
    times = np.unique(tab["t"])
    np.testing.assert_allclose(times, [0.0, 1.0], atol=0)
    start = tab[tab["t"] == 0.0]
    ref = (1.0 - start["r"] ** 2) * np.exp(-1.0)
    assert np.max(np.abs(start["S"] - ref)) <= 5e-3
    # orthogonal probing (code 0) everywhere the sweep has a real choice
    np.testing.assert_allclose(start["policy"][:-1], 0.0, atol=0)
    assert start["policy"][-1] == 255
    final = tab[tab["t"] == 1.0]
    np.testing.assert_allclose(final["S"], 1.0 - final["r"] ** 2, atol=1e-15)
    residuals = json.loads((tmp_path / "pde_residuals.json").read_text())
    assert [row["equation"] for row in residuals["rows"]] == [
        "radial_transport", "generator_backward"]
    assert all(row["max_abs"] <= 1e-6 for row in residuals["rows"])


def test_hjb_one_slice_returns_bequest(tmp_path):
    cfg = hjb_meas_cfg(grid={"mode": "radial", "t0": 0.3, "horizon": 0.3, "dx": 0.1},
                       verify=False)
    report = cli.cmd_hjb(cfg, str(tmp_path))
    assert report["passed"]
    tab = read_csv(tmp_path / "hjb_values.csv")
    assert len(tab) == 11
    np.testing.assert_allclose(tab["S"], 1.0 - tab["r"] ** 2, atol=0)


def test_hjb_deterministic_ball_all_slices(tmp_path):
    cfg = {
        "problem": "deterministic",
        "cost": {"kind": "target_miss", "target": [0, 0, 1]},
        "grid": {"mode": "ball", "horizon": 0.5, "dx": 0.25},
        "constraint": {"kind": "ball", "radius": 1.0},
        "lam": 0.4,
        "csv_slices": "all",
        "verify": False,
    }
    report = cli.cmd_hjb(cfg, str(tmp_path))
    assert report["passed"]
    meta = report["hjb"]
    assert meta["mode"] == "field_ball"
    dictionary = np.asarray(meta["dictionary"])
    assert dictionary.shape[1] == 3 and len(dictionary) == 7
    tab = read_csv(tmp_path / "hjb_values.csv")
    nodes = tab[tab["t"] == 0.0]
    assert len(tab) == meta["stored_slices"] * len(nodes)
    radii = np.sqrt(nodes["x"] ** 2 + nodes["y"] ** 2 + nodes["z"] ** 2)
    assert np.max(radii) <= 1.0 + 1e-12


def test_hjb_verify_flag_off(tmp_path):
    report = cli.cmd_hjb(hjb_meas_cfg(
        grid={"mode": "radial", "horizon": 0.1, "dx": 0.1}, verify=False),
        str(tmp_path))
    assert report["passed"]
    assert report["outputs"] == ["hjb_values.csv"]
    assert len(report["checks"]) == 2
    assert not os.path.exists(tmp_path / "pde_residuals.json")


def test_hjb_problem_key_guards(tmp_path):
    with pytest.raises(cli.ConfigError, match="deterministic-problem"):
        cli.cmd_hjb(hjb_meas_cfg(lam=0.5), str(tmp_path))
    det = {
        "problem": "deterministic",
        "cost": {"kind": "radius"},
        "grid": {"mode": "ball", "horizon": 0.5, "dx": 0.5},
        "constraint": {"kind": "ball"},
        "channels": [{"direction": [0, 0, 1], "strength": 1.0}],
    }
    with pytest.raises(cli.ConfigError, match="measurement-problem"):
        cli.cmd_hjb(det, str(tmp_path))
    del det["channels"], det["constraint"]
    with pytest.raises(cli.ConfigError, match="constraint"):
        cli.cmd_hjb(det, str(tmp_path))


# ------------------------------------------------------------------- purify


def test_purify_benchmark_small(tmp_path):
    cfg = {
        "seed": 21,
        "radii": [0.0, 0.6],
        "horizon": 1.0,
        "dt": 1e-3,
        "n_traj": 300,
        "lam": 1.0,
        "grid_dx": 0.05,
    }
    path = write_cfg(tmp_path, "pb.json", cfg)
    out = tmp_path / "out"
    assert cli.main(["purify-benchmark", "--config", str(path),
                     "--out", str(out), "--quiet"]) == 0
    tab = read_csv(out / "purify_benchmark.csv", )
    assert len(tab) == 2 * 5
    policies = np.genfromtxt(out / "purify_benchmark.csv", delimiter=",",
                             names=True, dtype=None, encoding="utf-8")["policy"]
    assert list(policies[:5]) == ["orthogonal_adaptive", "fixed_axis_ez",
                                  "fixed_axis_ex", "no_measurement", "grid_policy"]
    for rad in (0.0, 0.6):
        rows = tab[np.isclose(tab["r0"], rad)]
        means = dict(zip(policies[:5], rows["mean_final_deficit"]))
        assert abs(means["no_measurement"] - (1.0 - rad ** 2)) <= 1e-12
        closed = (1.0 - rad ** 2) * np.exp(-1.0)
        assert abs(means["orthogonal_adaptive"] - closed) <= 1e-3
        for name, mean in means.items():
            assert means["orthogonal_adaptive"] <= mean + 1e-2
        np.testing.assert_allclose(rows["orthogonal_closed_form"], closed,
                                   atol=1e-15)
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and len(report["checks"]) == 16
