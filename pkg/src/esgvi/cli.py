"""Command-line entry point.

    esgvi --command exp1 --trials 1000 --modes map-newton,esgvi-deriv-free --rule gh:10 --out runs/e1
    esgvi --config run.json --set var_r=0.04

Exit codes: 0 success, 1 more than 1% of solves failed (or the linear check
failed), 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .blockmat import BlockLayout, BlockSparseSym
from .cubature import CubatureRule
from .experiments import (LinearChainParams, Stereo1DParams, StereoSlamParams, linear_rts_check,
                          run_stereo_1d_trials, run_stereo_slam_trials, summarize)
from .factors import (FactorGraph, constant_velocity_factor, gaussian_prior_factor,
                      landmark_prior_factor, linear_factor, range_factor, stereo_factor)
from .solver import (GaussianEstimate, SolverConfig, SolverMode, assemble_newton_system,
                     evaluate_loss, iterate_to_convergence, write_history_csv)

log = logging.getLogger("esgvi")

COMMANDS = ("exp1", "exp2", "rts-check", "solve")
MODE_NAMES = ("map-newton", "map-gn", "esgvi-deriv", "esgvi-deriv-free", "esgvi-gn")
MAX_GH_ORDER = 20
FAILURE_LIMIT = 0.01

_DEFAULTS = {
    "exp1": {"trials": 50_000, "modes": ["map-newton", "esgvi-deriv-free"], "rule": "gh:10"},
    "exp2": {"trials": 1_000, "modes": ["map-newton", "esgvi-deriv"], "rule": "gh:3"},
    "rts-check": {"trials": 1, "modes": ["esgvi-deriv-free"], "rule": "gh:3"},
    "solve": {"trials": 1, "modes": ["esgvi-deriv-free"], "rule": "gh:3"},
}
_PARAMS = {"exp1": Stereo1DParams, "exp2": StereoSlamParams, "rts-check": LinearChainParams}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)} - {"mode"}
_FILE_KEYS = {"command", "seed", "trials", "modes", "rule", "out", "output_dir", "overrides",
              "problem"}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = 0
    trials: int = 1
    modes: List[str] = field(default_factory=list)
    rule: str = "gh:3"
    output_dir: Path = Path("esgvi_out")
    overrides: Dict[str, object] = field(default_factory=dict)
    problem: Optional[Path] = None

    def solver_modes(self) -> List[SolverMode]:
        default = CubatureRule.parse(self.rule)
        return [SolverMode.parse(m, default) for m in self.modes]

    def solver_config(self) -> SolverConfig:
        kw = {k[len("solver."):]: v for k, v in self.overrides.items() if k.startswith("solver.")}
        return SolverConfig(**kw)

    def params(self):
        cls = _PARAMS.get(self.command)
        if cls is None:
            return None
        kw = {k: v for k, v in self.overrides.items() if not k.startswith("solver.")}
        return cls(**kw)


def _parse_rule(text: str, key: str) -> CubatureRule:
    try:
        rule = CubatureRule.parse(str(text))
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None
    if rule.kind == "gauss_hermite" and not 1 <= rule.order <= MAX_GH_ORDER:
        raise ConfigError(key, f"Gauss-Hermite order must be in 1..{MAX_GH_ORDER}")
    return rule


def _validate_mode(text: str, key: str, default_rule: CubatureRule) -> None:
    name, _, rule_text = str(text).partition("@")
    if name.strip().lower() not in MODE_NAMES:
        raise ConfigError(key, f"unknown mode {name!r}; expected one of {', '.join(MODE_NAMES)}")
    if rule_text:
        _parse_rule(rule_text, key)
    try:
        SolverMode.parse(text, default_rule)
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _coerce_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_overrides(command: str, overrides: dict) -> None:
    cls = _PARAMS.get(command)
    allowed = {f.name: f for f in dataclasses.fields(cls)} if cls else {}
    for key, value in overrides.items():
        path = f"overrides.{key}"
        if key.startswith("solver."):
            if key[len("solver."):] not in _SOLVER_KEYS:
                raise ConfigError(path, "unknown solver setting")
            continue
        if key not in allowed:
            raise ConfigError(path, f"unknown parameter for {command}")
        default = allowed[key].default
        if isinstance(default, bool) or isinstance(default, str):
            ok = isinstance(value, type(default))
        elif isinstance(default, (int, float)):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if isinstance(default, int) and not isinstance(default, bool):
                ok = ok and float(value).is_integer()
        else:
            ok = True
        if not ok:
            raise ConfigError(path, f"expected {type(default).__name__}, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esgvi", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--command", choices=COMMANDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--modes", help="comma-separated, e.g. map-newton,esgvi-deriv@gh:3")
    p.add_argument("--rule", help="gh:M | spherical | ut:kappa")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--problem", type=Path, help="factor-graph JSON for the solve command")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="parameter override (repeatable); solver.* keys tune the solver")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv: Optional[List[str]] = None) -> RunConfig:
    """Merge a JSON config file with command-line flags (flags win) and validate."""
    args = build_parser().parse_args(argv)
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a JSON object")
        unknown = sorted(set(raw) - _FILE_KEYS)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
    if "out" in raw and "output_dir" in raw:
        raise ConfigError("out", "give either out or output_dir, not both")
    if "output_dir" in raw:
        raw["out"] = raw.pop("output_dir")
    for key in ("command", "seed", "trials", "rule", "out", "problem"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = str(value) if isinstance(value, Path) else value
    if args.modes is not None:
        raw["modes"] = [m for m in args.modes.split(",") if m.strip()]
    overrides = dict(raw.get("overrides") or {})
    if not isinstance(overrides, dict):
        raise ConfigError("overrides", "must be an object")
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError("set", f"expected KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _coerce_value(value)

    command = raw.get("command")
    if command is None:
        raise ConfigError("command", "missing")
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}")
    defaults = _DEFAULTS[command]

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed", "must be an integer in [0, 2^64)")
    trials = raw.get("trials", defaults["trials"])
    if not isinstance(trials, int) or isinstance(trials, bool) or trials < 1:
        raise ConfigError("trials", "must be a positive integer")
    rule_text = raw.get("rule", defaults["rule"])
    rule = _parse_rule(rule_text, "rule")
    modes = raw.get("modes", defaults["modes"])
    if not isinstance(modes, list) or not modes:
        raise ConfigError("modes", "must be a non-empty list")
    for i, m in enumerate(modes):
        _validate_mode(m, f"modes[{i}]", rule)
    labels = [SolverMode.parse(m, rule).label for m in modes]
    if len(set(labels)) != len(labels):
        raise ConfigError("modes", "duplicate mode")
    _check_overrides(command, overrides)
    problem = raw.get("problem")
    if command == "solve":
        if problem is None:
            raise ConfigError("problem", "solve needs a factor-graph file")
        if len(modes) != 1:
            raise ConfigError("modes", "solve takes exactly one mode")
    cfg = RunConfig(command, seed, trials, list(modes), str(rule), Path(raw.get("out", "esgvi_out")),
                    overrides, Path(problem) if problem is not None else None)
    try:
        cfg.params()
        cfg.solver_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError("overrides", str(exc)) from None
    return cfg


# problem files -----------------------------------------------------------

def load_problem(path: Path):
    """Read a factor graph and initial estimate from JSON.

    Schema: {"block_dims": [...], "factors": [{"type": ..., ...}],
    "init": {"mean": [...], "precision": "laplace" | "identity" | dense rows}}.
    "laplace" uses the Hessian of φ at the initial mean.
    """
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("problem", f"cannot read {path}: {exc}") from None
    try:
        layout = BlockLayout(tuple(spec["block_dims"]))
        factors = [_make_factor(f) for f in spec["factors"]]
        graph = FactorGraph(layout, factors)
        init = spec.get("init", {})
        mean = np.asarray(init.get("mean", np.zeros(layout.total_dim)), dtype=float)
        prec = init.get("precision", "laplace")
        if prec == "identity":
            P = BlockSparseSym.identity(graph.pattern)
        elif prec == "laplace":
            P, _ = assemble_newton_system(GaussianEstimate(mean, BlockSparseSym.identity(graph.pattern)),
                                          graph, SolverMode.map_newton())
        else:
            P = BlockSparseSym.from_dense(graph.pattern, np.asarray(prec, dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("problem", f"invalid factor graph: {exc}") from None
    return graph, GaussianEstimate(mean, P)


def _make_factor(f: dict):
    kind = f["type"]
    if kind == "gaussian_prior":
        return gaussian_prior_factor(f["block"], f["mean"], f["cov"])
    if kind == "landmark_prior":
        return landmark_prior_factor(f["block"], f["mean"], f["var"])
    if kind == "constant_velocity":
        return constant_velocity_factor(f["prev"], f["next"], f["T"], f["Q_C"])
    if kind == "stereo":
        return stereo_factor(f.get("pos"), f["landmark"], f["y"], f["f"], f["b"], f["var_r"])
    if kind == "range":
        return range_factor(f["pos"], f["landmark"], f["y"], f["var_r"])
    if kind == "linear":
        return linear_factor(f["blocks"], f["C"], f["y"], f["R"])
    raise ValueError(f"unknown factor type {kind!r}")


# outputs -----------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")


def write_trials_csv(path: Path, run) -> int:
    groups = []
    for row in run.per_trial:
        groups = list(next(iter(row.values())).bias)
        break
    header = (["trial", "mode", "iterations", "final_loss"] + [f"bias_{g}" for g in groups]
              + [f"sq_err_{g}" for g in groups] + ["nees", "failed"])
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(run.per_trial):
            for label in run.modes:
                m = row[label]
                w.writerow([i, label, m.iterations, _fmt(m.final_loss)]
                           + [_fmt(m.bias[g]) for g in groups] + [_fmt(m.sq_err[g]) for g in groups]
                           + [_fmt(m.nees), int(m.failed)])
                n += 1
    return n


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _failure_fraction(summary: dict) -> float:
    total = sum(s["trials"] for s in summary.values())
    failed = sum(s["failed"] for s in summary.values())
    return failed / total if total else 0.0


def _execute(cfg: RunConfig, out: Path, written: list) -> int:
    modes = cfg.solver_modes()
    solver_cfg = cfg.solver_config()
    params = cfg.params()
    summary = {"command": cfg.command, "seed": cfg.seed, "rule": cfg.rule,
               "modes": [m.label for m in modes]}
    if params is not None:
        summary["params"] = dataclasses.asdict(params)
    code = 0
    if cfg.command in ("exp1", "exp2"):
        runner = run_stereo_1d_trials if cfg.command == "exp1" else run_stereo_slam_trials
        run = runner(params, cfg.trials, cfg.seed, modes, solver_cfg)
        path = out / "trials.csv"
        written.append(path)
        write_trials_csv(path, run)
        stats = summarize(run)
        summary.update({"n_trials": cfg.trials, "redraws": run.redraws, "results": stats})
        summary.update(run.extra)
        frac = _failure_fraction(stats)
        summary["failure_fraction"] = frac
        if frac > FAILURE_LIMIT:
            log.error("%.2f%% of solves failed", 100 * frac)
            code = 1
    elif cfg.command == "rts-check":
        res = linear_rts_check(params, cfg.seed, modes[0])
        summary.update({"pass": res.passed, "max_residual": res.max_residual,
                        "mean_residual": res.mean_residual,
                        "precision_residual": res.precision_residual,
                        "variance_residual": res.variance_residual,
                        "one_full_step": res.one_full_step, "iterations": res.iterations})
        code = 0 if res.passed else 1
    else:
        graph, init = load_problem(cfg.problem)
        mode = modes[0]
        sc = dataclasses.replace(solver_cfg, mode=mode)
        res = iterate_to_convergence(graph, init, sc)
        path = out / "iterations.csv"
        written.append(path)
        write_history_csv(path, res.history)
        est = res.estimate
        summary.update({"converged": res.converged, "status": res.status,
                        "iterations": len(res.history), "mean": est.mean,
                        "marginal_variances": est.covariance.diagonal(),
                        "loss": evaluate_loss(est, graph, mode.rule)})
        code = 0 if res.status != "backtrack_exhausted" else 1
    path = out / "summary.json"
    written.append(path)
    _write_json(path, _clean(summary))
    return code


def run_command(cfg: RunConfig) -> int:
    """Run one configured command and write its outputs; returns the exit code."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list = []
    started = time.time()
    try:
        code = _execute(cfg, out, written)
    except ConfigError as exc:
        for p in written:
            p.unlink(missing_ok=True)
        log.error("config error: %s", exc)
        return 2
    except Exception:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    meta = {"version": __version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
            "elapsed_s": time.time() - started, "argv": sys.argv[1:], "exit_code": code}
    _write_json(out / "run_meta.json", _clean(meta))
    return code


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"esgvi: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run_command(cfg)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.error("run failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
