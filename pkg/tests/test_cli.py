import csv
import json
from pathlib import Path

import numpy as np
import pytest

from esgvi.cli import ConfigError, load_problem, main, parse_config, run_command


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestParseConfig:
    def test_valid_file(self, tmp_path):
        cfg_file = _write(tmp_path / "c.json", {"command": "exp1", "trials": 10, "seed": 3,
                                                 "modes": ["map-newton", "esgvi-deriv-free"],
                                                 "rule": "gh:10", "out": str(tmp_path / "o")})
        cfg = parse_config(["--config", str(cfg_file)])
        assert cfg.command == "exp1" and cfg.trials == 10 and cfg.seed == 3
        assert [m.label for m in cfg.solver_modes()] == ["map-newton", "esgvi-deriv-free@gh:10"]

    def test_defaults(self):
        cfg = parse_config(["--command", "exp2"])
        assert cfg.trials == 1000 and cfg.rule == "gh:3"
        assert cfg.modes == ["map-newton", "esgvi-deriv"]

    def test_flags_override_file(self, tmp_path):
        cfg_file = _write(tmp_path / "c.json", {"command": "exp1", "trials": 10,
                                                 "overrides": {"var_r": 0.04}})
        cfg = parse_config(["--config", str(cfg_file), "--trials", "4", "--set", "var_r=0.01"])
        assert cfg.trials == 4 and cfg.params().var_r == 0.01

    @pytest.mark.parametrize("argv,key", [
        (["--command", "exp1", "--rule", "gh:0"], "rule"),
        (["--command", "exp1", "--rule", "gh:21"], "rule"),
        ([], "command"),
        (["--command", "exp1", "--trials", "0"], "trials"),
        (["--command", "exp1", "--modes", "map-newton,newton"], "modes[1]"),
        (["--command", "exp1", "--modes", "map-newton,map-newton"], "modes"),
        (["--command", "exp1", "--set", "nope=1"], "overrides.nope"),
        (["--command", "exp1", "--set", "var_r=fast"], "overrides.var_r"),
        (["--command", "exp1", "--set", "var_r=-1"], "overrides"),
        (["--command", "exp1", "--set", "solver.bogus=1"], "overrides.solver.bogus"),
        (["--command", "exp2", "--set", "K=2.5"], "overrides.K"),
        (["--command", "solve"], "problem"),
    ])
    def test_errors_name_the_key(self, argv, key):
        with pytest.raises(ConfigError) as info:
            parse_config(argv)
        assert info.value.key == key

    def test_unknown_file_key(self, tmp_path):
        cfg_file = _write(tmp_path / "c.json", {"command": "exp1", "colour": "red"})
        with pytest.raises(ConfigError) as info:
            parse_config(["--config", str(cfg_file)])
        assert info.value.key == "colour"

    def test_solver_override(self):
        cfg = parse_config(["--command", "exp1", "--set", "solver.max_iters=7"])
        assert cfg.solver_config().max_iters == 7

    def test_main_returns_two_on_config_error(self, capsys):
        assert main(["--command", "exp1", "--rule", "gh:0"]) == 2
        assert "rule" in capsys.readouterr().err


class TestRuns:
    def test_rts_check(self, tmp_path):
        cfg = parse_config(["--command", "rts-check", "--out", str(tmp_path)])
        assert run_command(cfg) == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["pass"] is True and s["max_residual"] < 1e-9
        assert (tmp_path / "run_meta.json").exists()

    def test_exp1_rows(self, tmp_path):
        cfg = parse_config(["--command", "exp1", "--trials", "5", "--out", str(tmp_path)])
        assert run_command(cfg) == 0
        rows = _rows(tmp_path / "trials.csv")
        assert len(rows) == 10
        assert list(rows[0]) == ["trial", "mode", "iterations", "final_loss", "bias_depth",
                                 "sq_err_depth", "nees", "failed"]
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["n_trials"] == 5 and s["failure_fraction"] == 0.0

    def test_exp2_structure_fields(self, tmp_path):
        cfg = parse_config(["--command", "exp2", "--trials", "2", "--set", "K=99",
                            "--out", str(tmp_path)])
        assert run_command(cfg) == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["nnz_precision"] == 1687 and s["nnz_L"] == 15445
        assert len(_rows(tmp_path / "trials.csv")) == 4

    def test_reruns_are_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["--command", "exp1", "--trials", "6", "--seed", "9", "--out", str(out)]) == 0
            outs.append(out)
        for f in ("trials.csv", "summary.json"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def _problem(tmp_path):
    return _write(tmp_path / "p.json", {
        "block_dims": [1],
        "factors": [{"type": "landmark_prior", "block": 0, "mean": 20.0, "var": 9.0},
                    {"type": "stereo", "landmark": 0, "y": 2.3, "f": 400.0, "b": 0.1,
                     "var_r": 0.09}],
        "init": {"mean": [20.0], "precision": "laplace"},
    })


class TestSolve:
    def test_load_problem(self, tmp_path):
        graph, init = load_problem(_problem(tmp_path))
        assert len(graph.factors) == 2
        assert init.precision.to_dense()[0, 0] > 1 / 9

    def test_bad_problem(self, tmp_path):
        bad = _write(tmp_path / "bad.json", {"block_dims": [1], "factors": [{"type": "magic"}]})
        with pytest.raises(ConfigError):
            load_problem(bad)

    def test_solve_writes_history(self, tmp_path):
        out = tmp_path / "o"
        code = main(["--command", "solve", "--problem", str(_problem(tmp_path)),
                     "--modes", "esgvi-deriv-free@gh:10", "--out", str(out)])
        assert code == 0
        rows = _rows(out / "iterations.csv")
        assert rows and all(r["accepted"] in ("0", "1") for r in rows)
        s = json.loads((out / "summary.json").read_text())
        assert s["converged"] is True
        # measured disparity 2.3 pulls the depth below the prior mean of 20
        assert 16.0 < s["mean"][0] < 20.0
        assert np.isfinite(s["loss"])

    def test_solve_requires_single_mode(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(["--command", "solve", "--problem", str(_problem(tmp_path)),
                          "--modes", "map-newton,esgvi-deriv"])
