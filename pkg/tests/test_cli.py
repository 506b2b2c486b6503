import hashlib
import json
from pathlib import Path

import pytest

from bsmp.cli import main

BASE_CONFIG = {
    "model": {"key": "lq", "params": {"kappa": 0.5}},
    "horizon": 1.0,
    "steps": 20,
    "paths": 2000,
    "seed": 7,
    "antithetic": True,
    "basis": {"kind": "poly", "degree_or_cells": 3, "ridge": 1e-8},
    "picard_iters": 2,
    "optimizer": {"step_size": 0.5, "max_iters": 30, "tolerance": 1e-4, "u0": [0.0]},
    "control": [0.5],
    "theta_grid": [0.2, 0.1],
    "output_dir": "out",
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def tree_digest(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "run.log":
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestConfigHandling:
    def test_missing_file_is_config_error(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "nope.json")]) == 1
        assert "bsmp-error: config" in capsys.readouterr().err

    def test_malformed_json_is_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["solve", "--config", str(bad)]) == 1
        assert "bsmp-error" in capsys.readouterr().err

    def test_unknown_model_key_is_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, model={"key": "missing"})
        assert main(["solve", "--config", cfg]) == 1
        assert "unknown model key" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg["pathz"] = 10
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["solve", "--config", str(path)]) == 1

    def test_bad_theta_grid_rejected(self, tmp_path):
        cfg = write_config(tmp_path, theta_grid=[2.0, 0.5])
        assert main(["verify", "--config", cfg]) == 1


class TestExitCodes:
    def test_solve_ok(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 0

    def test_unreachable_tolerance_yields_verdict_failure(self, tmp_path):
        cfg = write_config(tmp_path, optimizer={"max_iters": 3, "tolerance": 1e-13})
        assert main(["optimize", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        names = {v["name"]: v["pass"] for v in summary["verdicts"]}
        assert not names["stationarity_reached"]


class TestOutputs:
    def test_solve_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, dump_brownian=True)
        out = tmp_path / "o"
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "trajectory.csv").exists()
        assert (out / "brownian.csv").exists()
        assert (out / "resolved_config.json").exists()
        assert (out / "figures" / "solve_trajectories.png").stat().st_size > 0
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        assert header == "path_id,step,y_1,z_11"
        summary = json.loads((out / "summary.json").read_text())
        for key in ("config_hash", "model", "J", "J_stderr", "residual", "verdicts", "runtime_seconds"):
            assert key in summary
        assert summary["runtime_seconds"] is None
        assert len(summary["per_step"]["mean_y"]) == BASE_CONFIG["steps"] + 1
        assert "runtime_seconds" in (out / "run.log").read_text()

    def test_optimize_history_schema(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["optimize", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "history.csv").read_text().splitlines()
        assert lines[0] == "iter,J,J_stderr,residual,step_size"
        assert len(lines) >= 2
        assert (out / "figures" / "optimize_history.png").stat().st_size > 0

    def test_cost_duality_verdict(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["cost", "--config", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["verdicts"][0]["name"] == "cost_duality_gap"
        assert summary["direct"]["J"] == summary["direct"]["initial_term"] + summary["direct"]["running_term"]

    def test_winsor_cap_reported(self, tmp_path):
        cfg = write_config(
            tmp_path,
            model={"key": "heavy_tail", "params": {}},
            control=[0.0],
            winsor_cap=5.0,
            seed=35,
        )
        out = tmp_path / "o"
        main(["solve", "--config", cfg, "--out", str(out)])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["winsor"]["cap"] == 5.0
        assert summary["winsor"]["clipped"] > 0


class TestReproducibility:
    def test_byte_identical_reruns_and_thread_invariance(self, tmp_path):
        cfg = write_config(tmp_path, theta_grid=[0.2, 0.1])
        out = tmp_path / "o"
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 0
        first = tree_digest(out)
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 0
        second = tree_digest(out)
        assert main(["verify", "--config", cfg, "--threads", "4", "--out", str(out)]) == 0
        third = tree_digest(out)
        assert first == second
        assert first == third
        assert len(first) > 3

    def test_seed_override_changes_outputs(self, tmp_path):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["solve", "--config", cfg, "--out", str(a)])
        main(["solve", "--config", cfg, "--seed", "8", "--out", str(b)])
        ja = json.loads((a / "summary.json").read_text())
        jb = json.loads((b / "summary.json").read_text())
        assert ja["config_hash"] != jb["config_hash"]
        assert ja["J"] != jb["J"]
