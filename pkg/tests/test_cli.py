"""Command-line entry points, run in process against tiny budgets."""

import json
import os

import numpy as np
import pytest

from stochphase.cli import ConfigError, load_config, main

FAST_GRID = ["grid_nx=81", "grid_ny=81"]


def read_json(path):
    with open(path) as f:
        return json.load(f)


# config resolution ----------------------------------------------------------

def test_defaults_need_an_output_dir():
    with pytest.raises(ConfigError):
        load_config()


def test_config_file_merge_and_precedence(tmp_path):
    cfgfile = tmp_path / "run.json"
    cfgfile.write_text(json.dumps({"model": "snic", "dt": 0.5, "out": "a"}))
    cfg = load_config(str(cfgfile))
    assert cfg.model == "snic" and cfg.dt == 0.5
    # flags override the file, positional overrides beat both
    cfg = load_config(str(cfgfile), overrides=["dt=0.25"],
                      flags={"model": "hopf", "out": str(tmp_path)})
    assert cfg.model == "hopf"
    assert cfg.dt == 0.25
    assert cfg.out == str(tmp_path)


def test_param_overrides_reach_the_model(tmp_path):
    cfg = load_config(overrides=["params.D=0.08", "params.m=0.999",
                                 "model=snic"], flags={"out": str(tmp_path)})
    model = cfg.build_model()
    assert model.params["D"] == 0.08
    assert model.params["m"] == 0.999


@pytest.mark.parametrize("overrides", [
    ["bogus_key=1"],
    ["maps=diagonal"],
    ["model=vanderpol"],
    ["dt=-0.1"],
    ["params="],
    ["notakeyvalue"],
])
def test_bad_configs_are_rejected(tmp_path, overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides, flags={"out": str(tmp_path)})


def test_unknown_file_key_is_rejected(tmp_path):
    cfgfile = tmp_path / "run.json"
    cfgfile.write_text(json.dumps({"out": "x", "typo_key": 3}))
    with pytest.raises(ConfigError):
        load_config(str(cfgfile))


# command round trips --------------------------------------------------------

def test_bad_override_exits_with_config_code(tmp_path, capsys):
    rc = main(["simulate", "--out", str(tmp_path), "bogus_key=1"])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().out


def test_simulate_writes_manifest(tmp_path, capsys):
    rc = main(["simulate", "--out", str(tmp_path), "--seed", "5",
               "n_traj=3", "dt=0.01", "t_burn=0.5", "t_end=1.5"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"]
    assert (tmp_path / "trajectory0.csv").exists()
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["command"] == "simulate"
    assert manifest["config"]["seed"] == 5
    assert sorted(manifest["outputs"]) == manifest["outputs"]


def test_phase_outputs_and_byte_identical_rerun(tmp_path, capsys):
    args = ["phase", "maps=both", "params.D=0.08"] + FAST_GRID
    for sub in ("one", "two"):
        rc = main(args + ["--out", str(tmp_path / sub)])
        assert rc == 0
        capsys.readouterr()
    for name in ("psi.csv", "theta.csv", "p0.csv", "phase_meta.json",
                 "manifest.json"):
        a = (tmp_path / "one" / name).read_bytes()
        b = (tmp_path / "two" / name).read_bytes()
        assert a == b, "%s differs between identical runs" % name
    meta = read_json(tmp_path / "one" / "phase_meta.json")
    assert meta["tbar"] > 0
    assert meta["lambda1"][1] > 0


def test_phase_refuses_non_planar_models(tmp_path, capsys):
    rc = main(["phase", "--model", "ml3d", "--out", str(tmp_path)])
    assert rc == 4
    payload = read_json(tmp_path / "FAILED.json")
    assert payload["error"] == "RefusedError"


def test_failure_marker_cleared_on_success(tmp_path, capsys):
    assert main(["phase", "--model", "ml3d", "--out", str(tmp_path)]) == 4
    assert (tmp_path / "FAILED.json").exists()
    rc = main(["simulate", "--out", str(tmp_path), "n_traj=2", "dt=0.01",
               "t_burn=0.1", "t_end=0.3"])
    assert rc == 0
    assert not (tmp_path / "FAILED.json").exists()


def test_longterm_refuses_underpowered_budget(tmp_path, capsys):
    rc = main(["longterm", "--out", str(tmp_path), "params.D=0.08",
               "n_traj=5", "t_burn=0.5", "t_end=2.0", "d_sweep=[0.08]"]
              + FAST_GRID)
    assert rc == 4


def test_reduce_report_structure(tmp_path, capsys):
    rc = main(["reduce", "--out", str(tmp_path), "params.D=0.08",
               "n_traj=40", "dt=0.005", "t_burn=5", "t_end=45", "n_bins=25",
               "smoothing=4"] + FAST_GRID)
    assert rc == 0
    report = read_json(tmp_path / "reduce_report.json")
    assert set(report) == {"max_rel_gap_a", "max_rel_gap_D",
                           "zero_crossings_a", "agreement_warning"}
    # rotation-invariant case at moderate noise: the two estimates agree
    assert report["max_rel_gap_a"] < 0.1
    assert not report["agreement_warning"]
    grid_tab = np.loadtxt(tmp_path / "reduced_grid.csv", delimiter=",",
                          skiprows=1)
    assert grid_tab.shape == (25, 4)
