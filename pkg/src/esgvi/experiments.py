"""Simulation studies: 1-D stereo depth, 1-D stereo SLAM, and a linear check.

Every trial draws its own generator from ``SeedSequence(seed, spawn_key=(i,))``
so results do not depend on trial order or on how trials are split across
worker processes.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .blockmat import (BlockLayout, BlockSparseSym, DimensionMismatch,
                       symbolic_fill)
from .cubature import CubatureRule, NonFiniteFactor
from .factors import (FactorGraph, constant_velocity_factor, gaussian_prior_factor,
                      landmark_prior_factor, linear_factor, motion_model, range_factor,
                      stereo_factor)
from .solver import (GaussianEstimate, SolverConfig, SolverError, SolverMode,
                     assemble_newton_system, evaluate_loss, iterate_to_convergence)

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-12


class GeometryInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class Stereo1DParams:
    mu_p: float = 20.0
    var_p: float = 9.0
    f: float = 400.0
    b: float = 0.1
    var_r: float = 0.09
    truncate_sigma: float = 4.0
    loss_rule: str = "gh:10"

    def __post_init__(self):
        for name in ("mu_p", "var_p", "f", "b", "var_r", "truncate_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class StereoSlamParams:
    K: int = 99
    T: float = 0.1
    Q_C: float = 0.01
    var_p: float = 1.0
    var_v: float = 0.01
    var_m: float = 9.0
    p0: float = 0.0
    v0: float = 1.0
    landmark_offset: float = 15.0
    depth_min: float = 1.0
    f: float = 400.0
    b: float = 0.1
    var_r: float = 0.09
    measurement: str = "stereo"
    max_redraws: int = 10000
    loss_rule: str = "gh:3"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("T", "Q_C", "var_p", "var_v", "var_m", "f", "b", "var_r", "depth_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.measurement not in ("stereo", "linear"):
            raise ValueError("measurement must be 'stereo' or 'linear'")
        if self.landmark_offset <= self.depth_min:
            raise GeometryInfeasible("landmark offset must exceed the depth floor")

    @property
    def state_dim(self) -> int:
        return 3 * self.K + 2


class TrialMetrics(NamedTuple):
    iterations: int
    final_loss: float
    bias: Dict[str, float]
    sq_err: Dict[str, float]
    nees: float
    failed: bool
    status: str
    monotone: bool


def compute_metrics(truth, est: GaussianEstimate, groups: Dict[str, np.ndarray],
                    iterations: int = 0, final_loss: float = float("nan"),
                    status: str = "", monotone: bool = True) -> TrialMetrics:
    """Signed mean error and mean squared error per group, plus NEES.

    NEES is the quadratic form of the error in the sparse precision.
    """
    truth = np.asarray(truth, dtype=float)
    if truth.shape != est.mean.shape:
        raise DimensionMismatch(f"truth has shape {truth.shape}, estimate {est.mean.shape}")
    err = est.mean - truth
    bias = {g: float(err[idx].mean()) for g, idx in groups.items()}
    sq = {g: float((err[idx] ** 2).mean()) for g, idx in groups.items()}
    nees = est.precision.quad_form(err)
    return TrialMetrics(iterations, final_loss, bias, sq, float(nees), False, status, monotone)


def failed_metrics(groups, status: str) -> TrialMetrics:
    nan = float("nan")
    return TrialMetrics(0, nan, {g: nan for g in groups}, {g: nan for g in groups}, nan,
                        True, status, True)


def is_monotone(history, slack: float = MONOTONE_SLACK) -> bool:
    """Every accepted step lowers its merit, and consecutive accepted losses
    do not increase unless the merit was rebased in between (GN modes)."""
    acc = [r for r in history if r.accepted]
    if any(r.loss > r.baseline + slack for r in acc):
        return False
    return all(b.loss <= a.loss + slack for a, b in zip(acc, acc[1:]) if b.baseline == a.loss)


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def _reference_loss(est, graph, rule) -> float:
    try:
        return float(evaluate_loss(est, graph, rule))
    except (NonFiniteFactor, SolverError):
        return float("nan")


def solve_and_measure(graph, init, truth, groups, mode: SolverMode, loss_rule: CubatureRule,
                      config: Optional[SolverConfig] = None) -> TrialMetrics:
    """Solve one trial with one mode; solver failures become a failed record."""
    config = config or SolverConfig()
    cfg = replace(config, mode=mode)
    try:
        res = iterate_to_convergence(graph, init, cfg)
    except (SolverError, NonFiniteFactor, np.linalg.LinAlgError) as exc:
        log.debug("trial failed under %s: %s", mode.label, exc)
        return failed_metrics(groups, type(exc).__name__)
    if res.status == "backtrack_exhausted":
        return failed_metrics(groups, res.status)
    iters = sum(r.accepted for r in res.history)
    return compute_metrics(truth, res.estimate, groups, iters,
                           _reference_loss(res.estimate, graph, loss_rule),
                           res.status, is_monotone(res.history))


def prior_precision(graph: FactorGraph, prior_factors, mean) -> BlockSparseSym:
    """Hessian of the (quadratic) prior factors, stored in the full graph's pattern."""
    prior_graph = FactorGraph(graph.layout, prior_factors)
    Pp, _ = assemble_newton_system(GaussianEstimate(mean, BlockSparseSym.identity(prior_graph.pattern)),
                                   prior_graph, SolverMode.map_newton())
    P = BlockSparseSym(graph.pattern)
    for (i, j), blk in Pp.blocks.items():
        P.block(i, j)[...] = blk
    return P


# Experiment 1 ------------------------------------------------------------

def stereo_1d_graph(params: Stereo1DParams, y: float) -> FactorGraph:
    return FactorGraph(BlockLayout((1,)), [
        landmark_prior_factor(0, params.mu_p, params.var_p),
        stereo_factor(None, 0, y, params.f, params.b, params.var_r),
    ])


def draw_stereo_1d(params: Stereo1DParams, rng: np.random.Generator):
    """Latent depth from the truncated prior and one disparity; returns (x, y, redraws)."""
    sd = np.sqrt(params.var_p)
    redraws = 0
    while True:
        x = rng.normal(params.mu_p, sd)
        if abs(x - params.mu_p) <= params.truncate_sigma * sd:
            break
        redraws += 1
    y = params.f * params.b / x + rng.normal(0.0, np.sqrt(params.var_r))
    return x, y, redraws


def _stereo_1d_chunk(args):
    params, seed, trials, modes, config = args
    groups = {"depth": np.array([0])}
    rule = CubatureRule.parse(params.loss_rule)
    out = []
    for i in trials:
        x, y, redraws = draw_stereo_1d(params, _trial_rng(seed, i))
        graph = stereo_1d_graph(params, y)
        prior = BlockSparseSym.from_dense(graph.pattern, np.array([[1.0 / params.var_p]]))
        row = {}
        for m in modes:
            init = GaussianEstimate([params.mu_p], prior.copy())
            row[m.label] = solve_and_measure(graph, init, [x], groups, m, rule, config)
        out.append((i, redraws, row))
    return out


class TrialRun(NamedTuple):
    modes: List[str]
    per_trial: List[Dict[str, TrialMetrics]]
    redraws: int
    extra: dict


def _workers() -> int:
    raw = os.environ.get("ESGVI_THREADS", "1").strip() or "1"
    n = int(raw)
    return os.cpu_count() or 1 if n <= 0 else n


def _run_chunked(fn, make_args, n_trials: int):
    workers = min(_workers(), n_trials)
    if workers <= 1:
        results = fn(make_args(range(n_trials)))
    else:
        bounds = np.linspace(0, n_trials, 4 * workers + 1).astype(int)
        chunks = [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(workers) as pool:
            results = [r for part in pool.map(fn, [make_args(c) for c in chunks]) for r in part]
    results.sort(key=lambda r: r[0])
    return results


def run_stereo_1d_trials(params: Stereo1DParams, n_trials: int, seed: int,
                         modes: Sequence[SolverMode],
                         config: Optional[SolverConfig] = None) -> TrialRun:
    """Monte Carlo over the 1-D stereo depth problem; every mode sees the same draws."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    modes = list(modes)
    results = _run_chunked(_stereo_1d_chunk,
                           lambda tr: (params, seed, tr, modes, config), n_trials)
    return TrialRun([m.label for m in modes], [r[2] for r in results],
                    sum(r[1] for r in results), {})


# Experiment 2 ------------------------------------------------------------

def slam_layout(K: int) -> BlockLayout:
    """Scalar blocks: p_0, v_0, ..., p_K, v_K, then m_1..m_K."""
    return BlockLayout((1,) * (3 * K + 2))


def slam_groups(K: int) -> Dict[str, np.ndarray]:
    n_robot = 2 * (K + 1)
    return {"position": np.arange(0, n_robot, 2), "velocity": np.arange(1, n_robot, 2),
            "landmark": np.arange(n_robot, n_robot + K)}


def _landmark_means(params: StereoSlamParams) -> np.ndarray:
    p_bar = params.p0 + params.v0 * params.T * np.arange(1, params.K + 1)
    return p_bar + params.landmark_offset


def slam_prior_factors(params: StereoSlamParams) -> list:
    K = params.K
    facs = [gaussian_prior_factor((0, 1), [params.p0, params.v0],
                                  np.diag([params.var_p, params.var_v]))]
    for k in range(1, K + 1):
        facs.append(constant_velocity_factor((2 * k - 2, 2 * k - 1), (2 * k, 2 * k + 1),
                                             params.T, [[params.Q_C]]))
    mu_m = _landmark_means(params)
    for k in range(1, K + 1):
        facs.append(landmark_prior_factor(2 * (K + 1) + k - 1, mu_m[k - 1], params.var_m))
    return facs


def slam_graph(params: StereoSlamParams, y: Optional[np.ndarray] = None) -> FactorGraph:
    """Prior, motion, landmark-prior and measurement factors.

    Landmark k is observed from positions k-1 and k; ``y`` holds the
    measurements in that order (2K values). Without ``y`` the measurement
    factors get zero disparities, which is enough for structural use.
    """
    K = params.K
    y = np.zeros(2 * K) if y is None else np.asarray(y, dtype=float)
    facs = slam_prior_factors(params)
    for k in range(1, K + 1):
        m = 2 * (K + 1) + k - 1
        for j, pos in enumerate((2 * (k - 1), 2 * k)):
            yk = y[2 * (k - 1) + j]
            if params.measurement == "stereo":
                facs.append(stereo_factor(pos, m, yk, params.f, params.b, params.var_r))
            else:
                facs.append(range_factor(pos, m, yk, params.var_r))
    return FactorGraph(slam_layout(K), facs)


def slam_structure(K: int = 99):
    """(scalar nonzeros of the precision, strictly-lower scalar nonzeros of L)."""
    pattern = slam_graph(StereoSlamParams(K=K)).pattern
    return pattern.scalar_nnz(), symbolic_fill(pattern).scalar_nnz_lower(strict=True)


def draw_slam(params: StereoSlamParams, rng: np.random.Generator):
    """Latent state from the joint prior (redrawn below the depth floor) and measurements."""
    K = params.K
    A, Q = motion_model(params.T, [[params.Q_C]])
    LQ = np.linalg.cholesky(Q)
    mu_m = _landmark_means(params)
    for redraws in range(params.max_redraws + 1):
        x = np.array([rng.normal(params.p0, np.sqrt(params.var_p)),
                      rng.normal(params.v0, np.sqrt(params.var_v))])
        traj = [x]
        for _ in range(K):
            x = A @ x + LQ @ rng.normal(size=2)
            traj.append(x)
        traj = np.array(traj)
        m = mu_m + np.sqrt(params.var_m) * rng.normal(size=K)
        pos = traj[:, 0]
        depths = np.stack([m - pos[:-1], m - pos[1:]], axis=1).ravel()
        if depths.min() >= params.depth_min:
            break
    else:
        raise GeometryInfeasible("no latent draw satisfied the depth floor")
    noise = np.sqrt(params.var_r) * rng.normal(size=2 * K)
    if params.measurement == "stereo":
        y = params.f * params.b / depths + noise
    else:
        y = depths + noise
    truth = np.concatenate([traj.ravel(), m])
    return truth, y, redraws


def slam_prior_estimate(params: StereoSlamParams, graph: FactorGraph) -> GaussianEstimate:
    """Mean at the prior means, precision from the quadratic prior factors only."""
    K = params.K
    A, _ = motion_model(params.T, [[params.Q_C]])
    mean = np.empty(params.state_dim)
    x = np.array([params.p0, params.v0])
    for k in range(K + 1):
        mean[2 * k: 2 * k + 2] = x
        x = A @ x
    mean[2 * (K + 1):] = _landmark_means(params)
    P = prior_precision(graph, slam_prior_factors(params), mean)
    return GaussianEstimate(mean, P)


def _slam_chunk(args):
    params, seed, trials, modes, config = args
    groups = slam_groups(params.K)
    rule = CubatureRule.parse(params.loss_rule)
    out = []
    for i in trials:
        truth, y, redraws = draw_slam(params, _trial_rng(seed, i))
        graph = slam_graph(params, y)
        init = slam_prior_estimate(params, graph)
        row = {}
        for m in modes:
            start = GaussianEstimate(init.mean.copy(), init.precision.copy())
            row[m.label] = solve_and_measure(graph, start, truth, groups, m, rule, config)
        out.append((i, redraws, row))
    return out


def run_stereo_slam_trials(params: StereoSlamParams, n_trials: int, seed: int,
                           modes: Sequence[SolverMode],
                           config: Optional[SolverConfig] = None) -> TrialRun:
    """Monte Carlo over the 1-D SLAM problem with metrics per variable group."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    modes = list(modes)
    results = _run_chunked(_slam_chunk, lambda tr: (params, seed, tr, modes, config), n_trials)
    nnz, nnz_l = slam_structure(params.K)
    return TrialRun([m.label for m in modes], [r[2] for r in results],
                    sum(r[1] for r in results), {"nnz_precision": nnz, "nnz_L": nnz_l})


# Linear check ------------------------------------------------------------

@dataclass(frozen=True)
class LinearChainParams:
    K: int = 100
    dim: int = 2
    T: float = 0.1
    Q_C: float = 1.0
    var_x0: float = 1.0
    var_meas: float = 0.05
    measure_every: int = 1


class RtsCheck(NamedTuple):
    passed: bool
    max_residual: float
    mean_residual: float
    precision_residual: float
    variance_residual: float
    one_full_step: bool
    iterations: int


def _lifted_batch(params: LinearChainParams, x0, C, ys, measured):
    """Dense posterior from the lifted form: P = A⁻ᵀQ⁻¹A⁻¹ + CᵀR⁻¹C."""
    K, n = params.K, 2 * params.dim
    A, Q = motion_model(params.T, np.eye(params.dim))
    Q = Q * params.Q_C
    N = n * (K + 1)
    Ainv = np.eye(N)
    Qinv = np.zeros((N, N))
    Qinv[:n, :n] = np.eye(n) / params.var_x0
    Qk_inv = np.linalg.inv(Q)
    for k in range(1, K + 1):
        Ainv[k * n:(k + 1) * n, (k - 1) * n:k * n] = -A
        Qinv[k * n:(k + 1) * n, k * n:(k + 1) * n] = Qk_inv
    v = np.zeros(N)
    v[:n] = x0
    Cbig = np.zeros((len(measured) * params.dim, N))
    for r, k in enumerate(measured):
        Cbig[r * params.dim:(r + 1) * params.dim, k * n:(k + 1) * n] = C
    Rinv = np.eye(Cbig.shape[0]) / params.var_meas
    P = Ainv.T @ Qinv @ Ainv + Cbig.T @ Rinv @ Cbig
    rhs = Ainv.T @ Qinv @ v + Cbig.T @ Rinv @ np.concatenate(ys) if len(ys) else Ainv.T @ Qinv @ v
    return np.linalg.solve(P, rhs), P


def linear_rts_check(params: LinearChainParams = LinearChainParams(), seed: int = 0,
                     mode: Optional[SolverMode] = None, tol: float = 1e-9) -> RtsCheck:
    """Run ESGVI on a linear-Gaussian chain and compare with the dense batch answer.

    Residuals are relative (max-abs difference over max-abs value).
    """
    if params.K < 2:
        raise ValueError("K must be >= 2")
    mode = mode or SolverMode.esgvi_deriv_free(CubatureRule.gauss_hermite(3))
    rng = np.random.default_rng(seed)
    K, d = params.K, params.dim
    n = 2 * d
    A, Q = motion_model(params.T, params.Q_C * np.eye(d))
    x0 = np.concatenate([np.zeros(d), np.ones(d)])
    x = x0 + np.sqrt(params.var_x0) * rng.normal(size=n)
    LQ = np.linalg.cholesky(Q)
    C = np.hstack([np.eye(d), np.zeros((d, d))])
    facs = [gaussian_prior_factor(0, x0, params.var_x0 * np.eye(n))]
    measured, ys = [], []
    for k in range(K + 1):
        if k > 0:
            x = A @ x + LQ @ rng.normal(size=n)
            facs.append(constant_velocity_factor(k - 1, k, params.T, params.Q_C * np.eye(d)))
        if params.measure_every and k % params.measure_every == 0:
            yk = C @ x + np.sqrt(params.var_meas) * rng.normal(size=d)
            facs.append(linear_factor((k,), C, yk, params.var_meas * np.eye(d)))
            measured.append(k)
            ys.append(yk)
    graph = FactorGraph(BlockLayout((n,) * (K + 1)), facs)
    # prior initialization: mean rolled out through A, precision of the prior factors
    mean0 = np.empty(n * (K + 1))
    xm = x0
    for k in range(K + 1):
        mean0[k * n:(k + 1) * n] = xm
        xm = A @ xm
    P0 = prior_precision(graph, [f for f in facs if f.params.get("kind") != "linear"], mean0)
    res = iterate_to_convergence(graph, GaussianEstimate(mean0, P0), SolverConfig(mode))
    mu_ref, P_ref = _lifted_batch(params, x0, C, ys, measured)
    est = res.estimate
    r_mu = np.max(np.abs(est.mean - mu_ref)) / np.max(np.abs(mu_ref))
    r_P = np.max(np.abs(est.precision.to_dense() - P_ref)) / np.max(np.abs(P_ref))
    var_ref = np.diag(np.linalg.inv(P_ref))
    r_var = np.max(np.abs(est.covariance.diagonal() - var_ref)) / np.max(var_ref)
    first = res.history[0] if res.history else None
    # starting at the exact answer (no measurements) leaves only a roundoff step,
    # which the line search may shorten or reject; that counts as a full step
    tiny = first is not None and first.dmu_norm <= 1e-12 * max(1.0, np.abs(mean0).max())
    one_step = bool(first is not None and ((first.accepted and first.step_scale == 1.0) or tiny))
    worst = float(max(r_mu, r_P, r_var))
    return RtsCheck(bool(worst < tol and one_step and res.converged), worst, float(r_mu),
                    float(r_P), float(r_var), one_step, len(res.history))


# Aggregation -------------------------------------------------------------

def _stats(values) -> dict:
    a = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if a.size == 0:
        return {"mean": None, "median": None, "q1": None, "q3": None, "n": 0}
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"mean": float(a.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "n": int(a.size)}


def summarize(run: TrialRun) -> dict:
    """Per-mode aggregates: means, medians and quartiles of every metric."""
    out = {}
    for label in run.modes:
        rows = [t[label] for t in run.per_trial]
        ok = [r for r in rows if not r.failed]
        groups = list(rows[0].bias) if rows else []
        out[label] = {
            "trials": len(rows),
            "failed": len(rows) - len(ok),
            "monotone_violations": sum(not r.monotone for r in rows),
            "iterations": _stats([r.iterations for r in ok]),
            "final_loss": _stats([r.final_loss for r in ok]),
            "nees": _stats([r.nees for r in ok]),
            "bias": {g: _stats([r.bias[g] for r in ok]) for g in groups},
            "sq_err": {g: _stats([r.sq_err[g] for r in ok]) for g in groups},
        }
    return out
