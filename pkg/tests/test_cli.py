"""End-to-end command line runs via subprocess."""

import csv
import json
import math
import os
import subprocess
import sys

import pytest


def run_cli(tmp_path, subcommand, config, *extra, env_extra=None, name="cfg"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(config))
    env = dict(os.environ)
    env.pop("AFFINEFLOW_WORKERS", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "affineflow", subcommand,
         "--config", str(cfg_path), *extra],
        capture_output=True, text=True, env=env, cwd=tmp_path)


def test_affine_run_artifacts(tmp_path):
    out = tmp_path / "out"
    proc = run_cli(tmp_path, "affine",
                   {"kind": "affine", "t_end": 50.0, "samples": 40,
                    "out": str(out)})
    assert proc.returncode == 0, proc.stderr
    header = (out / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["t", "s", "tau"]
    assert header[3] == "A11" and header[-1] == "ode_energy"
    verdict = json.loads((out / "verdict.json").read_text())
    assert verdict["schema"] == "affineflow-verdict/1"
    assert verdict["all_pass"]
    assert verdict["checks"]["affine-ode-exactness"]["status"] == "pass"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema"] == "affineflow-run/1"
    assert "trajectory.csv" in manifest["artifacts"]
    assert manifest["config"]["kind"] == "affine"
    assert "[PASS] affine-ode-exactness" in proc.stdout


def test_verify_subset(tmp_path):
    out = tmp_path / "v"
    proc = run_cli(tmp_path, "verify",
                   {"kind": "verify",
                    "checks": ["affine-ode-exactness", "hardy-embedding"],
                    "out": str(out)})
    assert proc.returncode == 0, proc.stderr
    verdict = json.loads((out / "verdict.json").read_text())
    assert set(verdict["checks"]) == {"affine-ode-exactness",
                                      "hardy-embedding"}
    for entry in verdict["checks"].values():
        assert entry["status"] == "pass"
        assert entry["measured"] is not None
    assert "verdict: PASS (2/2 checks clean)" in proc.stdout


def test_invalid_delta_is_config_error(tmp_path):
    proc = run_cli(tmp_path, "affine",
                   {"kind": "affine", "delta": -1.0,
                    "out": str(tmp_path / "x")})
    assert proc.returncode == 2
    assert "config error" in proc.stderr


def test_unknown_key_and_unknown_check(tmp_path):
    proc = run_cli(tmp_path, "affine",
                   {"kind": "affine", "t_final": 10.0,
                    "out": str(tmp_path / "x")})
    assert proc.returncode == 2
    assert "t_final" in proc.stderr

    proc2 = run_cli(tmp_path, "verify",
                    {"kind": "verify", "checks": ["no-such-check"],
                     "out": str(tmp_path / "y")}, name="cfg2")
    assert proc2.returncode == 2
    assert "check names" in proc2.stderr


def test_kind_subcommand_mismatch(tmp_path):
    proc = run_cli(tmp_path, "affine",
                   {"kind": "verify", "out": str(tmp_path / "x")})
    assert proc.returncode == 2


def test_empty_sweep_grid(tmp_path):
    proc = run_cli(tmp_path, "sweep",
                   {"kind": "sweep", "sweep": {"gamma": []},
                    "out": str(tmp_path / "s")})
    assert proc.returncode == 2
    assert "empty" in proc.stderr


def test_perturb_radial_zero_amplitude(tmp_path):
    out = tmp_path / "p0"
    proc = run_cli(tmp_path, "perturb",
                   {"kind": "perturb-radial", "amplitude": 0.0,
                    "grid": {"kind": "radial", "n": 128},
                    "solver": {"mode": "radial-nonlinear", "tau_end": 1.0,
                               "snap_dtau": 0.25},
                    "t_horizon": 100.0, "out": str(out)})
    assert proc.returncode == 0, proc.stderr
    verdict = json.loads((out / "verdict.json").read_text())
    steady = verdict["checks"]["steady-state-preservation"]
    assert steady["status"] == "pass"
    assert steady["measured"] <= 1e-13
    assert (out / "norms.csv").exists()
    assert (out / "monitor.csv").exists()


def test_perturb_radial_degenerate_data_is_numerical_failure(tmp_path):
    proc = run_cli(tmp_path, "perturb",
                   {"kind": "perturb-radial", "amplitude": 5.0,
                    "grid": {"kind": "radial", "n": 128},
                    "solver": {"mode": "radial-nonlinear", "tau_end": 2.0,
                               "snap_dtau": 0.25},
                    "t_horizon": 100.0, "out": str(tmp_path / "pbad")})
    assert proc.returncode == 3
    assert "numerical failure" in proc.stderr


def test_seed_changes_data_and_is_echoed(tmp_path):
    base = {"kind": "perturb-radial", "amplitude": 1e-3,
            "grid": {"kind": "radial", "n": 96},
            "solver": {"mode": "radial-nonlinear", "tau_end": 1.0,
                       "snap_dtau": 0.5},
            "t_horizon": 100.0}
    outs = {}
    for seed in (1, 2):
        out = tmp_path / f"seed{seed}"
        cfg = dict(base, out=str(out))
        proc = run_cli(tmp_path, "perturb", cfg, "--seed", str(seed),
                       name=f"cfg{seed}")
        assert proc.returncode == 0, proc.stderr
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == seed
        outs[seed] = (out / "norms.csv").read_text()
    assert outs[1] != outs[2]


def test_sweep_rates_and_determinism(tmp_path):
    contents = {}
    for label, env_extra in (("serial", None),
                             ("parallel", {"AFFINEFLOW_WORKERS": "2"})):
        out = tmp_path / label
        config = {"kind": "sweep",
                  "sweep": {"gamma": [1.4, 5.0 / 3.0], "amplitude": [1e-3]},
                  "grid": {"kind": "radial", "n": 96},
                  "solver": {"mode": "radial-nonlinear", "tau_end": 1.5,
                             "snap_dtau": 0.5},
                  "t_horizon": 100.0, "out": str(out)}
        proc = run_cli(tmp_path, "sweep", config, env_extra=env_extra,
                       name=label)
        assert proc.returncode == 0, proc.stderr

        with open(out / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        by_gamma = {float(r["gamma"]): r for r in rows}
        # mu0 = (3*gamma-3)/2 * mu1; the isotropic background at rest has
        # mu1 = 1 for gamma = 5/3 and accelerates to sqrt(5/3) for gamma =
        # 7/5 (all the initial potential energy converts to expansion)
        row14 = by_gamma[1.4]
        assert float(row14["mu0"]) == pytest.approx(
            0.6 * float(row14["mu1"]), rel=1e-12)
        assert float(row14["mu1"]) == pytest.approx(math.sqrt(5.0 / 3.0),
                                                    rel=1e-2)
        row53 = by_gamma[5.0 / 3.0]
        assert float(row53["mu0"]) == pytest.approx(1.0, rel=1e-6)
        for r in rows:
            assert r["status"] == "ok"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["workers"] == (2 if label == "parallel" else 1)
        contents[label] = (out / "summary.csv").read_bytes()
    assert contents["serial"] == contents["parallel"]
