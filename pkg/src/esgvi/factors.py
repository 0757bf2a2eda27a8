"""Factors of a negative log-likelihood and the built-in factor library.

A factor pairs a *kernel* (the model, shared by every factor of one kind)
with per-factor *data* (measurement, prior mean, ...). Kernels evaluate a
whole group at once on ``(F, L, n)`` point arrays: F factors, L sigmapoints
each. The per-factor callables on ``FactorDef`` take ``(L, n)`` and are
thin views onto the kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .blockmat import BlockLayout, PrecisionPattern, intern_pattern
from .cubature import NonFiniteFactor

DEPTH_EPS = 1e-6


class FactorError(Exception):
    pass


class NonSpdCovariance(FactorError, ValueError):
    pass


class InvalidTimestep(FactorError, ValueError):
    pass


class UnreferencedBlock(FactorError):
    pass


class NonPositiveDepth(NonFiniteFactor):
    pass


def _spd_inverse(cov, name="covariance") -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
        raise NonSpdCovariance(f"{name} must be square and symmetric")
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NonSpdCovariance(f"{name} is not positive definite") from None
    ci = np.linalg.inv(c)
    return ci.T @ ci


# kernels -----------------------------------------------------------------

class PhiKernel:
    """Wraps per-factor callables; never shared, so its groups hold one factor."""

    has_error_form = False

    def __init__(self, phi, grad=None, hess=None):
        self._phi, self._grad, self._hess = phi, grad, hess

    @property
    def has_derivatives(self) -> bool:
        return self._grad is not None and self._hess is not None

    def phi(self, X, D):
        return np.stack([np.asarray(self._phi(x), dtype=float).reshape(-1) for x in X])

    def grad(self, X, D):
        return np.stack([self._grad(x) for x in X])

    def hess(self, X, D):
        return np.stack([self._hess(x) for x in X])


class ErrorKernel:
    """phi = ½ e(x; d)ᵀ W⁻¹ e(x; d) for batched ``error(X, D)`` -> (F, L, m).

    ``jacobian`` returns (F, L, m, n); ``error_hessian`` returns
    (F, L, m, n, n) and may be omitted when ``linear``.
    """

    has_error_form = True

    def __init__(self, error, cov, jacobian=None, error_hessian=None, linear=False):
        self.error = error
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.info = _spd_inverse(self.cov)
        self.jacobian = jacobian
        self.error_hessian = error_hessian
        self.linear = linear
        self._variants = {}

    @property
    def has_derivatives(self) -> bool:
        return self.jacobian is not None and (self.linear or self.error_hessian is not None)

    def with_cov(self, cov) -> "ErrorKernel":
        """Same error model with covariance ``cov``; equal covariances share one kernel."""
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        key = (cov.shape, cov.tobytes())
        k = self._variants.get(key)
        if k is None:
            k = ErrorKernel(self.error, cov, self.jacobian, self.error_hessian, self.linear)
            k._variants = self._variants
            self._variants[key] = k
        return k

    def phi(self, X, D):
        e = self.error(X, D)
        return 0.5 * np.einsum("...i,ij,...j->...", e, self.info, e)

    def grad(self, X, D):
        return np.einsum("...mn,mk,...k->...n", self.jacobian(X, D), self.info, self.error(X, D))

    def hess(self, X, D):
        J = self.jacobian(X, D)
        H = np.einsum("...mi,mk,...kj->...ij", J, self.info, J)
        if not self.linear:
            r = self.error(X, D) @ self.info
            H = H + np.einsum("...m,...mij->...ij", r, self.error_hessian(X, D))
        return H


def _per_factor(fn):
    """Lift an (L, n) -> (L, ...) callable to (F, L, n) by looping over F."""
    if fn is None:
        return None
    return lambda X, D: np.stack([fn(x) for x in X])


@dataclass(frozen=True)
class ErrorForm:
    """phi(x) = ½ e(x)ᵀ W⁻¹ e(x), with optional analytic error derivatives."""

    error: Callable
    cov: np.ndarray
    info: np.ndarray
    jacobian: Optional[Callable] = None
    error_hessian: Optional[Callable] = None  # (L, n) -> (L, m, n, n); None with linear=True
    linear: bool = False


@dataclass(frozen=True, eq=False)
class FactorDef:
    """One term φ_k over the stacked variable blocks ``variables``."""

    variables: tuple
    kernel: object
    data: np.ndarray = field(default_factory=lambda: np.zeros(0))
    params: dict = field(default_factory=dict)

    def _single(self, fn):
        D = self.data[None]
        return lambda X: fn(np.asarray(X, dtype=float)[None], D)[0]

    @property
    def phi(self) -> Callable:
        return self._single(self.kernel.phi)

    @property
    def has_derivatives(self) -> bool:
        return self.kernel.has_derivatives

    @property
    def grad(self) -> Optional[Callable]:
        return self._single(self.kernel.grad) if self.has_derivatives else None

    @property
    def hess(self) -> Optional[Callable]:
        return self._single(self.kernel.hess) if self.has_derivatives else None

    @cached_property
    def error_form(self) -> Optional[ErrorForm]:
        k = self.kernel
        if not k.has_error_form:
            return None
        jac = self._single(k.jacobian) if k.jacobian is not None else None
        eh = self._single(k.error_hessian) if k.error_hessian is not None else None
        return ErrorForm(self._single(k.error), k.cov, k.info, jac, eh, k.linear)

    def with_error_cov(self, cov) -> "FactorDef":
        """Same error model with a replaced covariance W."""
        if not self.kernel.has_error_form:
            raise FactorError("factor has no error form")
        return FactorDef(self.variables, self.kernel.with_cov(cov), self.data, self.params)


def _blocks(b) -> tuple:
    return tuple(int(v) for v in b) if isinstance(b, (tuple, list, np.ndarray)) else (int(b),)


def custom_factor(variables, phi, grad=None, hess=None, params=None) -> FactorDef:
    """Factor from a plain ``phi`` over (L, n) points, with optional derivatives."""
    return FactorDef(_blocks(variables), PhiKernel(phi, grad, hess), np.zeros(0), dict(params or {}))


def error_factor(variables, error, cov, jacobian=None, error_hessian=None,
                 linear=False, params=None) -> FactorDef:
    """Factor from a per-factor error function (L, n) -> (L, m) and its covariance."""
    kernel = ErrorKernel(_per_factor(error), cov, _per_factor(jacobian),
                         _per_factor(error_hessian), linear)
    return FactorDef(_blocks(variables), kernel, np.zeros(0), dict(params or {}))


# built-in factors --------------------------------------------------------

_KERNELS: dict = {}


def _linear_kernel(C: np.ndarray, cov: np.ndarray) -> ErrorKernel:
    """Shared kernel for e = y - C x with y carried as factor data."""
    key = ("linear", C.shape, C.tobytes())
    base = _KERNELS.get(key)
    if base is None:
        Cc = C.copy()

        def error(X, D):
            return D[:, None, :] - X @ Cc.T

        def jacobian(X, D):
            return np.broadcast_to(-Cc, X.shape[:2] + Cc.shape)

        base = _KERNELS[key] = ErrorKernel(error, cov, jacobian, linear=True)
    return base.with_cov(cov)


def linear_factor(blocks: Sequence[int], C, y, R, params=None) -> FactorDef:
    """e(x) = y - C x for the stacked variables of ``blocks``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    p = {"kind": "linear", "C": C, "y": y}
    p.update(params or {})
    return FactorDef(_blocks(blocks), _linear_kernel(C, R), y, p)


def gaussian_prior_factor(block, mean, cov) -> FactorDef:
    """½ (x - mean)ᵀ cov⁻¹ (x - mean) on one block (or stacked blocks)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (len(mean), len(mean)):
        raise ValueError("prior mean and covariance dimensions disagree")
    # e = x - mean, written as y - C x with C = -I, y = -mean
    kernel = _linear_kernel(-np.eye(len(mean)), cov)
    return FactorDef(_blocks(block), kernel, -mean,
                     {"kind": "gaussian_prior", "mean": mean, "cov": cov})


def landmark_prior_factor(block, mu_m: float, var_m: float) -> FactorDef:
    """½ (m - mu_m)² / var_m."""
    if not var_m > 0:
        raise NonSpdCovariance("landmark prior variance must be positive")
    f = gaussian_prior_factor(block, [mu_m], [[var_m]])
    return FactorDef(f.variables, f.kernel, f.data, {**f.params, "kind": "landmark_prior"})


def motion_model(T: float, Q_C):
    """Transition A and process covariance Q of the white-noise-acceleration prior."""
    if not T > 0:
        raise InvalidTimestep(f"timestep must be positive, got {T}")
    Qc = np.atleast_2d(np.asarray(Q_C, dtype=float))
    n = Qc.shape[0]
    eye = np.eye(n)
    A = np.block([[eye, T * eye], [np.zeros((n, n)), eye]])
    Q = np.block([[T**3 / 3.0 * Qc, T**2 / 2.0 * Qc], [T**2 / 2.0 * Qc, T * Qc]])
    return A, Q


def constant_velocity_factor(block_prev, block_next, T: float, Q_C) -> FactorDef:
    """½ (x_k - A x_{k-1})ᵀ Q⁻¹ (x_k - A x_{k-1}).

    ``block_prev``/``block_next`` are a single block index each, or a
    tuple of block indices whose concatenation is the (position, velocity)
    state, e.g. separate scalar blocks for p and v.
    """
    A, Q = motion_model(T, Q_C)
    _spd_inverse(Q, "process covariance")
    n = A.shape[0]
    C = -np.hstack([-A, np.eye(n)])
    return FactorDef(_blocks(block_prev) + _blocks(block_next), _linear_kernel(C, Q), np.zeros(n),
                     {"kind": "constant_velocity", "T": T, "Q_C": Q_C, "A": A, "Q": Q})


def _stereo_kernel(single: bool, fb: float, var_r: float, depth_eps: float) -> ErrorKernel:
    key = ("stereo", single, fb, depth_eps)
    base = _KERNELS.get(key)
    if base is None:
        sign = np.array([1.0]) if single else np.array([-1.0, 1.0])
        outer = np.outer(sign, sign)

        def depth(X):
            d = X[..., 0] if single else X[..., 1] - X[..., 0]
            if np.any(d <= depth_eps):
                raise NonPositiveDepth(f"depth {d.min():.3g} m below the domain floor")
            return d

        def error(X, D):
            return (D[:, None, 0] - fb / depth(X))[..., None]

        def jacobian(X, D):
            return (fb / depth(X) ** 2)[..., None, None] * sign

        def error_hessian(X, D):
            return (-2.0 * fb / depth(X) ** 3)[..., None, None, None] * outer

        base = _KERNELS[key] = ErrorKernel(error, [[var_r]], jacobian, error_hessian)
    return base.with_cov([[var_r]])


def stereo_factor(pos_block, landmark_block, y: float, f: float, b: float, var_r: float,
                  depth_eps: float = DEPTH_EPS) -> FactorDef:
    """½ (y - fb/(m - p))² / var_r.

    With ``pos_block=None`` the factor acts on a single depth variable
    (the one-dimensional case, p = 0).
    """
    if not (f > 0 and b > 0 and var_r > 0):
        raise ValueError("f, b and var_r must be positive")
    single = pos_block is None
    variables = (int(landmark_block),) if single else (int(pos_block), int(landmark_block))
    return FactorDef(variables, _stereo_kernel(single, float(f * b), float(var_r), depth_eps),
                     np.array([float(y)]),
                     {"kind": "stereo", "y": y, "f": f, "b": b, "var_r": var_r})


def range_factor(pos_block, landmark_block, y: float, var_r: float) -> FactorDef:
    """Linear stand-in for the stereo factor: e = y - (m - p)."""
    return linear_factor((pos_block, landmark_block), [[-1.0, 1.0]], [y], [[var_r]],
                         params={"kind": "range"})


# graphs ------------------------------------------------------------------

class FactorGroup(NamedTuple):
    """Factors sharing one kernel and variable dimension, evaluated together."""
    kernel: object
    members: np.ndarray      # positions in graph.factors
    data: np.ndarray         # (F, p)
    variables: tuple         # per-member block tuples
    indices: np.ndarray      # (F, n) scalar indices into the state


class FactorGraph:
    """A block layout plus the factors of φ(x) = Σ_k φ_k(x_k)."""

    def __init__(self, layout: BlockLayout, factors: Sequence[FactorDef]):
        self.layout = layout if isinstance(layout, BlockLayout) else BlockLayout(tuple(layout))
        self.factors = list(factors)
        for f in self.factors:
            if any(v < 0 or v >= self.layout.n_blocks for v in f.variables):
                raise ValueError(f"factor references blocks {f.variables} outside the layout")
            if len(set(f.variables)) != len(f.variables):
                raise ValueError(f"factor references a block twice: {f.variables}")

    @cached_property
    def pattern(self) -> PrecisionPattern:
        return derived_pattern(self)

    @cached_property
    def factor_indices(self) -> list:
        return [self.layout.indices(f.variables) for f in self.factors]

    @cached_property
    def groups(self) -> list:
        buckets: dict = {}
        for pos, (f, idx) in enumerate(zip(self.factors, self.factor_indices)):
            buckets.setdefault((id(f.kernel), len(idx), f.data.shape), []).append(pos)
        out = []
        for members in buckets.values():
            fs = [self.factors[i] for i in members]
            out.append(FactorGroup(fs[0].kernel, np.array(members),
                                   np.stack([f.data for f in fs]),
                                   tuple(f.variables for f in fs),
                                   np.stack([self.factor_indices[i] for i in members])))
        return out

    def with_factors(self, replacements: dict) -> "FactorGraph":
        """Copy with factors at the given positions replaced."""
        factors = list(self.factors)
        for i, f in replacements.items():
            factors[i] = f
        g = FactorGraph(self.layout, factors)
        if "pattern" in self.__dict__:
            g.__dict__["pattern"] = self.pattern
        return g


def derived_pattern(graph: FactorGraph) -> PrecisionPattern:
    """Union of all within-factor block pairs plus the diagonal."""
    touched = set()
    pairs = set()
    for f in graph.factors:
        vs = f.variables
        touched.update(vs)
        for a in vs:
            for c in vs:
                if a > c:
                    pairs.add((a, c))
    missing = sorted(set(range(graph.layout.n_blocks)) - touched)
    if missing:
        raise UnreferencedBlock(f"blocks {missing} are touched by no factor")
    return intern_pattern(PrecisionPattern(graph.layout, frozenset(pairs)))
