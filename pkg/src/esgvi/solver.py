"""Exactly sparse Gaussian variational inference.

One iteration assembles the new precision and the mean step from per-factor
expectations over the factor marginals, then backtracks
``mu + a^B dmu``, ``P + a^B (P_new - P)`` until the loss goes down.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .blockmat import (BlockSparseSym, LdlFactors, NotPositiveDefinite, PartialCovariance,
                       PatternViolation, ldl_factorize, log_det, scatter_add, solve,
                       takahashi_partial_inverse)
from .cubature import (CubatureRule, NonFiniteFactor, SqrtFailure, check_finite,
                       expect_moments, sigma_points_batch)
from .factors import FactorGraph

log = logging.getLogger(__name__)

MODE_KINDS = ("map_newton", "map_gn", "esgvi_deriv", "esgvi_deriv_free", "esgvi_gn")


class SolverError(Exception):
    pass


class MissingCovarianceBlock(SolverError):
    pass


class MissingErrorForm(SolverError):
    pass


class MissingDerivatives(SolverError):
    pass


class DivergedIndefinite(SolverError):
    pass


class DenseCapExceeded(SolverError):
    pass


class DegenerateW(SolverError):
    pass


@dataclass(frozen=True)
class SolverMode:
    kind: str
    rule: CubatureRule = CubatureRule.mean_point()
    derivative_free: bool = False

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown solver mode {self.kind!r}")
        if self.kind.startswith("map_") and not self.rule.is_mean_point:
            raise ValueError("MAP modes use the single mean point")

    @classmethod
    def map_newton(cls):
        return cls("map_newton")

    @classmethod
    def map_gn(cls):
        return cls("map_gn")

    @classmethod
    def esgvi_deriv(cls, rule):
        return cls("esgvi_deriv", rule)

    @classmethod
    def esgvi_deriv_free(cls, rule):
        return cls("esgvi_deriv_free", rule, derivative_free=True)

    @classmethod
    def esgvi_gn(cls, rule, derivative_free=True):
        return cls("esgvi_gn", rule, derivative_free=derivative_free)

    @classmethod
    def parse(cls, text: str, default_rule: Optional[CubatureRule] = None) -> "SolverMode":
        """Parse ``name[@rule]`` with names like ``esgvi-deriv-free`` or ``map-newton``."""
        name, _, rule_text = text.strip().partition("@")
        kind = name.strip().lower().replace("-", "_")
        if kind not in MODE_KINDS:
            raise ValueError(f"unknown solver mode {name!r}")
        if kind.startswith("map_"):
            if rule_text and not CubatureRule.parse(rule_text).is_mean_point:
                raise ValueError(f"{name} takes no cubature rule")
            return cls(kind)
        rule = CubatureRule.parse(rule_text) if rule_text else default_rule
        if rule is None:
            raise ValueError(f"{name} needs a cubature rule")
        return cls(kind, rule, derivative_free=kind in ("esgvi_deriv_free", "esgvi_gn"))

    @property
    def label(self) -> str:
        name = self.kind.replace("_", "-")
        return name if self.is_map else f"{name}@{self.rule}"

    @property
    def is_map(self) -> bool:
        return self.kind.startswith("map_")

    @property
    def is_gn(self) -> bool:
        return self.kind in ("map_gn", "esgvi_gn")


@dataclass(frozen=True)
class SolverConfig:
    mode: SolverMode = SolverMode.map_newton()
    alpha: float = 0.95
    max_backtracks: int = 100
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    stall_rel_tol: float = 1e-6
    max_iters: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.stall_rel_tol <= 0:
            raise ValueError("tolerances must be positive")


class IterationRecord(NamedTuple):
    iteration: int
    loss: float
    step_scale: float
    dmu_norm: float
    accepted: bool
    baseline: float = float("nan")  # merit the step was compared against


class SolveResult(NamedTuple):
    estimate: "GaussianEstimate"
    history: list
    converged: bool
    status: str


class GaussianEstimate:
    """Mean plus block-sparse precision; factorization and selected
    covariance are computed on first use and cached."""

    def __init__(self, mean, precision: BlockSparseSym, factors: Optional[LdlFactors] = None):
        self.mean = np.asarray(mean, dtype=float)
        self.precision = precision
        if factors is not None:
            self.__dict__["factors"] = factors

    @property
    def layout(self):
        return self.precision.layout

    @cached_property
    def factors(self) -> LdlFactors:
        return ldl_factorize(self.precision)

    @cached_property
    def covariance(self) -> PartialCovariance:
        return takahashi_partial_inverse(self.factors)

    @property
    def log_det_precision(self) -> float:
        return log_det(self.factors)

    @classmethod
    def from_dense(cls, pattern, mean, precision) -> "GaussianEstimate":
        return cls(mean, BlockSparseSym.from_dense(pattern, precision))


def _inv_spd(S: np.ndarray) -> np.ndarray:
    """Inverse of one SPD matrix or of a stack of them."""
    if S.shape[-1] == 1:
        return 1.0 / S
    c = np.linalg.cholesky(S)
    ci = np.linalg.inv(c)
    return np.swapaxes(ci, -1, -2) @ ci


def extract_marginal(est: GaussianEstimate, variables: Sequence[int]):
    """Mean and covariance of the stacked ``variables`` under the estimate."""
    idx = est.layout.indices(variables)
    try:
        S = est.covariance.gather(tuple(variables))
    except PatternViolation as exc:
        raise MissingCovarianceBlock(str(exc)) from None
    return est.mean[idx], S


# group plumbing ----------------------------------------------------------

def _group_cache(graph: FactorGraph) -> dict:
    return graph.__dict__.setdefault("_solver_cache", {})


def _gather_indices(graph, gi, pattern):
    """(F, n, n) flat indices of every member's marginal block in ``pattern`` storage."""
    key = ("gather", gi, id(pattern))
    cache = _group_cache(graph)
    hit = cache.get(key)
    if hit is None:
        st = pattern.storage
        try:
            hit = (pattern, np.stack([st.symmetric_gather(v) for v in graph.groups[gi].variables]))
        except PatternViolation as exc:
            raise MissingCovarianceBlock(str(exc)) from None
        cache[key] = hit
    return hit[1]


def _scatter_plan(graph, gi, pattern):
    """Target storage indices and the (F, n, n) mask of local entries in stored blocks."""
    key = ("scatter", gi, id(pattern))
    cache = _group_cache(graph)
    hit = cache.get(key)
    if hit is None:
        grp = graph.groups[gi]
        dims = pattern.layout.block_dims
        masks = []
        for v in grp.variables:
            blk = np.repeat(np.array(v), [dims[b] for b in v])
            # lower block pairs; diagonal blocks are stored in full
            masks.append(blk[:, None] >= blk[None, :])
        mask = np.stack(masks)
        gather = _gather_indices(graph, gi, pattern)
        hit = (pattern, gather[mask], mask)
        cache[key] = hit
    return hit[1], hit[2]


def _group_points(est, graph, gi, rule):
    grp = graph.groups[gi]
    mu = est.mean[grp.indices]
    S = None
    if not rule.is_mean_point:
        cov = est.covariance
        S = cov.data[_gather_indices(graph, gi, cov.pattern)]
    w, X, delta = sigma_points_batch(mu, S, rule)
    return grp, w, X, delta, S


def _scatter_system(graph, terms):
    """Sum per-group (H (F,n,n), g (F,n)) into a precision and rhs = -Σ g."""
    pattern = graph.pattern
    P = BlockSparseSym(pattern)
    n = graph.layout.total_dim
    targets, values, rows, grads = [], [], [], []
    for gi, (H, g) in enumerate(terms):
        tgt, mask = _scatter_plan(graph, gi, pattern)
        targets.append(tgt)
        values.append(H[mask])
        rows.append(graph.groups[gi].indices.ravel())
        grads.append(g.ravel())
    P.data += np.bincount(np.concatenate(targets), np.concatenate(values), minlength=P.data.size)
    rhs = -np.bincount(np.concatenate(rows), np.concatenate(grads), minlength=n)
    return P, rhs


def _newton_terms(grp, w, X, delta, S, rule, derivative_free):
    """Expected gradients (F, n) and Hessians (F, n, n) of one group."""
    k = grp.kernel
    if derivative_free and not rule.is_mean_point:
        wv = w * check_finite(k.phi(X, grp.data))
        scalar = wv.sum(axis=1)
        column = np.einsum("fl,fln->fn", wv, delta)
        matrix = np.einsum("fl,fli,flj->fij", wv, delta, delta)
        Si = _inv_spd(S)
        g = np.einsum("fij,fj->fi", Si, column)
        H = Si @ matrix @ Si - Si * scalar[:, None, None]
    else:
        if not k.has_derivatives:
            raise MissingDerivatives(f"factors on {grp.variables[0]} lack analytic derivatives")
        g = np.einsum("l,fln->fn", w, check_finite(k.grad(X, grp.data), "gradient"))
        H = np.einsum("l,flij->fij", w, check_finite(k.hess(X, grp.data), "hessian"))
    return 0.5 * (H + np.swapaxes(H, 1, 2)), g


def assemble_newton_system(est: GaussianEstimate, graph: FactorGraph, mode: SolverMode):
    """New precision E[∂²φ/∂xᵀ∂x] and right-hand side -E[∂φ/∂xᵀ].

    The derivative-free path uses E[∂φ] = Σ_kk⁻¹ E[(x-μ)φ] and
    E[∂²φ] = Σ_kk⁻¹ E[(x-μ)(x-μ)ᵀφ] Σ_kk⁻¹ - Σ_kk⁻¹ E[φ] per factor.
    """
    terms = []
    for gi in range(len(graph.groups)):
        grp, w, X, delta, S = _group_points(est, graph, gi, mode.rule)
        terms.append(_newton_terms(grp, w, X, delta, S, mode.rule, mode.derivative_free))
    return _scatter_system(graph, terms)


def _statistical_terms(grp, w, X, delta, S, rule, derivative_free):
    """Expected errors (F, m) and (statistical) Jacobians (F, m, n) of one group."""
    k = grp.kernel
    if not k.has_error_form:
        raise MissingErrorForm(f"factors on {grp.variables[0]} have no error form")
    E = check_finite(k.error(X, grp.data), "error")
    ebar = np.einsum("l,flm->fm", w, E)
    if derivative_free and not rule.is_mean_point:
        Ebar = np.einsum("l,flm,fln->fmn", w, E, delta) @ _inv_spd(S)
    else:
        if k.jacobian is None:
            raise MissingDerivatives(f"factors on {grp.variables[0]} lack an error Jacobian")
        Ebar = np.einsum("l,flmn->fmn", w, check_finite(k.jacobian(X, grp.data), "jacobian"))
    return ebar, Ebar


def assemble_gn_system(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule,
                       derivative_free: bool = True):
    """Gauss-Newton system from expected errors and (statistical) Jacobians."""
    terms = []
    for gi in range(len(graph.groups)):
        grp, w, X, delta, S = _group_points(est, graph, gi, rule)
        ebar, Ebar = _statistical_terms(grp, w, X, delta, S, rule, derivative_free)
        EtW = np.swapaxes(Ebar, 1, 2) @ grp.kernel.info
        terms.append((EtW @ Ebar, np.einsum("fnm,fm->fn", EtW, ebar)))
    return _scatter_system(graph, terms)


def _assemble(est, graph, mode):
    if mode.is_gn:
        return assemble_gn_system(est, graph, mode.rule, mode.derivative_free)
    return assemble_newton_system(est, graph, mode)


def expected_factor_sum(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule) -> float:
    total = 0.0
    for gi in range(len(graph.groups)):
        grp, w, X, _, _ = _group_points(est, graph, gi, rule)
        total += float(np.sum(check_finite(grp.kernel.phi(X, grp.data)) @ w))
    return total


def evaluate_loss(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule) -> float:
    """V(q) = Σ_k E_{q_k}[φ_k] + ½ ln|Σ⁻¹| with expectations by ``rule``."""
    return expected_factor_sum(est, graph, rule) + 0.5 * est.log_det_precision


def gn_data_term(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule) -> float:
    """Σ_k ½ E[e_k]ᵀ W_k⁻¹ E[e_k] under the estimate's marginals."""
    total = 0.0
    for gi in range(len(graph.groups)):
        grp, w, X, _, _ = _group_points(est, graph, gi, rule)
        if not grp.kernel.has_error_form:
            raise MissingErrorForm(f"factors on {grp.variables[0]} have no error form")
        ebar = np.einsum("l,flm->fm", w, check_finite(grp.kernel.error(X, grp.data), "error"))
        total += 0.5 * float(np.einsum("fi,ij,fj->", ebar, grp.kernel.info, ebar))
    return total


def evaluate_gn_loss(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule) -> float:
    """V'(q) = Σ_k ½ E[e_k]ᵀ W_k⁻¹ E[e_k] + ½ ln|Σ⁻¹|."""
    return gn_data_term(est, graph, rule) + 0.5 * est.log_det_precision


def map_objective(est: GaussianEstimate, graph: FactorGraph) -> float:
    """Σ_k φ_k(μ_k): the negative log joint at the mean."""
    return expected_factor_sum(est, graph, CubatureRule.mean_point())


def decision_loss(est: GaussianEstimate, graph: FactorGraph, mode: SolverMode) -> float:
    """Merit used for backtracking and the convergence test.

    MAP modes use φ(μ): at a single point ½ ln|Σ⁻¹| does not depend on the
    mean and is unbounded below in Σ⁻¹. GN modes use the data term of V'
    for the same reason (with ē held fixed, ½ ln|Σ⁻¹| has no minimum), so
    the mean is line-searched at the covariance the statistical Jacobians
    were taken under. ESGVI modes use V itself.
    """
    if mode.is_map and not mode.is_gn:
        return map_objective(est, graph)
    if mode.is_gn:
        return gn_data_term(est, graph, mode.rule)
    return evaluate_loss(est, graph, mode.rule)


_CANDIDATE_FAILURES = (NotPositiveDefinite, NonFiniteFactor, SqrtFailure, np.linalg.LinAlgError)


def _fallback_allowed(graph, mode, fallback_gn: bool) -> bool:
    return fallback_gn and not mode.is_gn and all(g.kernel.has_error_form for g in graph.groups)


def _propose(est, graph, mode, use_gn: bool):
    if use_gn:
        P_new, rhs = assemble_gn_system(est, graph, mode.rule, mode.derivative_free)
    else:
        P_new, rhs = _assemble(est, graph, mode)
    return P_new, rhs, ldl_factorize(P_new)


def _line_search(est, graph, mode, config, loss, P_new, rhs, F_new):
    """Backtrack from the full step; returns (accepted or None, full-step loss, ‖δμ‖)."""
    joint = not (mode.is_map or mode.is_gn)
    dmu = solve(F_new, rhs)
    dmu_norm = float(np.linalg.norm(dmu))
    full = np.inf
    for B in range(config.max_backtracks + 1):
        t = config.alpha ** B
        mean = est.mean + t * dmu
        if B == 0 or not joint:
            cand = GaussianEstimate(mean, P_new, F_new)
        else:
            cand = GaussianEstimate(mean, est.precision.combine(P_new, t))
        if mode.is_gn:
            # GN merit: the mean moves, the covariance stays the one Ē was taken under
            probe = GaussianEstimate(mean, est.precision, est.factors)
            if "covariance" in est.__dict__:
                probe.__dict__["covariance"] = est.covariance
        else:
            probe = cand
        try:
            c_loss = decision_loss(probe, graph, mode)
        except _CANDIDATE_FAILURES:
            continue
        if not np.isfinite(c_loss):
            continue
        if B == 0:
            full = c_loss
        if c_loss <= loss:
            return (cand, c_loss, t), full, dmu_norm
    return None, full, dmu_norm


def iterate_to_convergence(graph: FactorGraph, init: GaussianEstimate,
                           config: SolverConfig = SolverConfig(),
                           fallback_gn: bool = True) -> SolveResult:
    """Run the update/backtracking loop from ``init``.

    ESGVI modes backtrack ``μ + a^B δμ`` and ``Σ⁻¹ + a^B δΣ⁻¹`` jointly on V.
    MAP and GN modes take the assembled precision as is and backtrack the
    mean only (see ``decision_loss``).

    An iteration whose assembled precision is indefinite, or whose step
    cannot lower the loss at any backtrack, is retried once with the
    Gauss-Newton assembly (when every factor has an error form). If the
    full step changes the loss by less than ``stall_rel_tol`` the run stops
    as converged at a fixed point of the update. Otherwise a failed
    retry ends the run flagged non-converged (``backtrack_exhausted``),
    or raises ``DivergedIndefinite`` if no positive-definite system exists.
    """
    mode = config.mode
    allow_gn = _fallback_allowed(graph, mode, fallback_gn)
    est = init
    loss = decision_loss(est, graph, mode)
    history = []
    status = "max_iters"
    converged = False
    for it in range(config.max_iters):
        if mode.is_gn and it > 0:
            # the GN merit moves with the covariance; rebase on the new iterate
            loss = decision_loss(est, graph, mode)
        accepted, stalled, dmu_norm = None, False, 0.0
        for use_gn in ((False, True) if allow_gn else (False,)):
            try:
                P_new, rhs, F_new = _propose(est, graph, mode, use_gn)
            except NotPositiveDefinite:
                if use_gn or not allow_gn:
                    raise DivergedIndefinite("assembled precision is not positive definite") from None
                log.debug("iteration %d: indefinite system, retrying with Gauss-Newton", it)
                continue
            accepted, full, dmu_norm = _line_search(est, graph, mode, config, loss, P_new, rhs, F_new)
            if accepted is not None:
                break
            if not use_gn and abs(full - loss) <= config.stall_rel_tol * abs(loss) + config.abs_tol:
                stalled = True
                break
            log.debug("iteration %d: no decrease along the step", it)
        if accepted is None:
            history.append(IterationRecord(it, loss, 0.0, dmu_norm, False, loss))
            converged, status = (True, "stationary") if stalled else (False, "backtrack_exhausted")
            break
        cand, c_loss, t = accepted
        history.append(IterationRecord(it, c_loss, t, dmu_norm, True, loss))
        change = loss - c_loss
        est, loss = cand, c_loss
        if change <= config.rel_tol * abs(loss) + config.abs_tol:
            converged, status = True, "converged"
            break
    return SolveResult(est, history, converged, status)


def write_history_csv(path, history: Sequence[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "step_scale", "dmu_norm", "accepted"])
        for r in history:
            w.writerow([r.iteration, repr(float(r.loss)), repr(float(r.step_scale)),
                        repr(float(r.dmu_norm)), int(r.accepted)])


# dense helpers (small problems only) -------------------------------------

def _dense_state(est, dense_cap):
    n = est.layout.total_dim
    if n > dense_cap:
        raise DenseCapExceeded(f"state dimension {n} exceeds the dense cap {dense_cap}")
    P = est.precision.to_dense()
    return P, np.linalg.inv(P)


def loss_gradients_dense(est: GaussianEstimate, graph: FactorGraph, rule: CubatureRule,
                         dense_cap: int = 50):
    """∂V/∂μᵀ and ∂V/∂Σ⁻¹ from the dense covariance.

    Factor moments over each marginal are lifted to the full state with the
    Gaussian conditional: x - μ = B (x_k - μ_k) + r, B = Σ Pᵀ Σ_kk⁻¹, r independent.
    """
    P, S = _dense_state(est, dense_cap)
    n = len(est.mean)
    first = np.zeros(n)
    second = np.zeros((n, n))
    scalar = 0.0
    for f, idx in zip(graph.factors, graph.factor_indices):
        Skk = S[np.ix_(idx, idx)]
        m = expect_moments(f.phi, est.mean[idx], Skk, rule)
        Bk = S[:, idx] @ np.linalg.inv(Skk)
        first += Bk @ m.column
        second += Bk @ m.matrix @ Bk.T + (S - Bk @ Skk @ Bk.T) * m.scalar
        scalar += m.scalar
    g_mu = P @ first
    g_prec = -0.5 * second + 0.5 * S * scalar + 0.5 * S
    return g_mu, g_prec


def fim_dense(est: GaussianEstimate, mean_precision: Optional[np.ndarray] = None,
              dense_cap: int = 50) -> np.ndarray:
    """Fisher information diag(Σ⁻¹, ½ Σ⊗Σ) for α = [μ; vec(Σ⁻¹)].

    ``mean_precision`` overrides the mean block (e.g. with the updated
    precision that the Newton-style step solves against).
    """
    P, S = _dense_state(est, dense_cap)
    n = len(est.mean)
    out = np.zeros((n + n * n, n + n * n))
    out[:n, :n] = P if mean_precision is None else mean_precision
    out[n:, n:] = 0.5 * np.kron(S, S)
    return out


def natural_gradient_step(est, graph, rule, mean_precision=None, dense_cap=50):
    """(δμ, δΣ⁻¹) = -FIM⁻¹ ∂V/∂α via a dense solve."""
    g_mu, g_prec = loss_gradients_dense(est, graph, rule, dense_cap)
    n = len(g_mu)
    grad = np.concatenate([g_mu, g_prec.ravel(order="F")])
    step = -np.linalg.solve(fim_dense(est, mean_precision, dense_cap), grad)
    return step[:n], step[n:].reshape((n, n), order="F")


# parameter estimation ----------------------------------------------------

def em_update_measurement_cov(est: GaussianEstimate, graph: FactorGraph,
                              factor_subset: Sequence[int],
                              rule: CubatureRule = CubatureRule.gauss_hermite(3),
                              jitter: float = 1e-12) -> np.ndarray:
    """M-step W = (1/K) Σ_k E_{q_k}[e_k e_kᵀ] over ``factor_subset``."""
    if len(factor_subset) == 0:
        raise DegenerateW("no factors to estimate W from")
    members = set(int(i) for i in factor_subset)
    total = 0.0
    for gi, grp in enumerate(graph.groups):
        sel = np.array([int(i) in members for i in grp.members])
        if not sel.any():
            continue
        if not grp.kernel.has_error_form:
            raise MissingErrorForm(f"factors on {grp.variables[0]} have no error form")
        _, w, X, _, _ = _group_points(est, graph, gi, rule)
        E = check_finite(grp.kernel.error(X[sel], grp.data[sel]), "error")
        total = total + np.einsum("l,fli,flj->ij", w, E, E)
    W = 0.5 * (total + total.T) / len(factor_subset)
    m = W.shape[0]
    W = W + jitter * max(np.trace(W) / m, 1.0) * np.eye(m)
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise DegenerateW("estimated W is not positive definite") from None
    return W


def with_measurement_cov(graph: FactorGraph, factor_subset: Sequence[int], W) -> FactorGraph:
    return graph.with_factors({i: graph.factors[i].with_error_cov(W) for i in factor_subset})


def em_loss(est: GaussianEstimate, graph: FactorGraph, factor_subset: Sequence[int],
            rule: CubatureRule) -> float:
    """V(q|W) including the ½ K ln|W| normalization of the W-dependent factors."""
    W = graph.factors[factor_subset[0]].error_form.cov
    return evaluate_loss(est, graph, rule) + 0.5 * len(factor_subset) * np.linalg.slogdet(W)[1]


class EmResult(NamedTuple):
    graph: FactorGraph
    estimate: GaussianEstimate
    covariances: list
    losses: list


def run_em(graph: FactorGraph, init: GaussianEstimate, factor_subset: Sequence[int],
           config: SolverConfig, rounds: int = 10) -> EmResult:
    """Alternate E-steps (solve to convergence) and closed-form M-steps on W.

    ``losses`` holds V(q|W) after every E-step and every M-step, in order.
    """
    rule = config.mode.rule
    covs = [graph.factors[factor_subset[0]].error_form.cov]
    losses = []
    est = init
    for _ in range(rounds):
        est = iterate_to_convergence(graph, est, config).estimate
        losses.append(em_loss(est, graph, factor_subset, rule))
        W = em_update_measurement_cov(est, graph, factor_subset, rule)
        graph = with_measurement_cov(graph, factor_subset, W)
        covs.append(W)
        losses.append(em_loss(est, graph, factor_subset, rule))
    return EmResult(graph, est, covs, losses)
