"""Sigmapoint rules and weighted factor moments under a Gaussian marginal."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg

MAX_POINTS = 10**6


class CubatureError(Exception):
    pass


class InvalidKappa(CubatureError, ValueError):
    pass


class PointBudgetExceeded(CubatureError):
    pass


class SqrtFailure(CubatureError):
    pass


class NonFiniteFactor(CubatureError, FloatingPointError):
    """A factor evaluated to NaN/inf at a sigmapoint."""


@dataclass(frozen=True)
class CubatureRule:
    kind: str
    kappa: float = 0.0
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("unscented", "spherical", "gauss_hermite"):
            raise ValueError(f"unknown cubature kind {self.kind!r}")
        if self.kind == "gauss_hermite" and int(self.order) < 1:
            raise ValueError("Gauss-Hermite order must be >= 1")

    @classmethod
    def unscented(cls, kappa: float) -> "CubatureRule":
        return cls("unscented", kappa=float(kappa))

    @classmethod
    def spherical(cls) -> "CubatureRule":
        return cls("spherical")

    @classmethod
    def gauss_hermite(cls, order: int) -> "CubatureRule":
        return cls("gauss_hermite", order=int(order))

    @classmethod
    def mean_point(cls) -> "CubatureRule":
        """Degenerate single point at the mean (MAP evaluation)."""
        return cls("gauss_hermite", order=1)

    @property
    def is_mean_point(self) -> bool:
        return self.kind == "gauss_hermite" and self.order == 1

    @classmethod
    def parse(cls, spec: str) -> "CubatureRule":
        """Parse ``gh:M``, ``spherical`` or ``ut:kappa``."""
        spec = spec.strip().lower()
        if spec == "spherical":
            return cls.spherical()
        head, _, arg = spec.partition(":")
        if head == "gh" and arg:
            return cls.gauss_hermite(int(arg))
        if head == "ut" and arg:
            return cls.unscented(float(arg))
        raise ValueError(f"bad cubature rule {spec!r}")

    def __str__(self):
        if self.kind == "gauss_hermite":
            return f"gh:{self.order}"
        if self.kind == "unscented":
            return f"ut:{self.kappa:g}"
        return "spherical"


class WeightedPoints(NamedTuple):
    weights: np.ndarray      # (L,)
    unit_points: np.ndarray  # (L, dim)


class FactorMoments(NamedTuple):
    scalar: float
    column: np.ndarray
    matrix: np.ndarray


@lru_cache(maxsize=None)
def hermite_nodes(order: int):
    """1-D probabilists' Gauss-Hermite nodes/weights (weights sum to one).

    Golub-Welsch: eigenvalues of the symmetric Jacobi matrix with
    off-diagonal sqrt(1..M-1); weights are squared first eigenvector entries.
    """
    if order == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, order, dtype=float))
    nodes, vecs = scipy.linalg.eigh_tridiagonal(np.zeros(order), off)
    weights = vecs[0] ** 2
    # enforce exact +/- symmetry (eigenvalues come out sorted)
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if order % 2:
        nodes[order // 2] = 0.0
    weights = weights / weights.sum()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


@lru_cache(maxsize=None)
def _unit_rule_cached(rule: CubatureRule, dim: int, max_points: int) -> WeightedPoints:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if rule.kind == "unscented":
        lam = dim + rule.kappa
        if lam <= 0:
            raise InvalidKappa(f"dim + kappa = {lam} must be positive")
        eye = np.sqrt(lam) * np.eye(dim)
        pts = np.vstack([np.zeros((1, dim)), eye, -eye])
        w = np.full(2 * dim + 1, 1.0 / (2.0 * lam))
        w[0] = rule.kappa / lam
    elif rule.kind == "spherical":
        eye = np.sqrt(dim) * np.eye(dim)
        pts = np.vstack([eye, -eye])
        w = np.full(2 * dim, 1.0 / (2 * dim))
    else:
        m = rule.order
        if m ** dim > max_points:
            raise PointBudgetExceeded(f"{m}^{dim} points exceeds the cap of {max_points}")
        nodes, weights = hermite_nodes(m)
        idx = np.array(list(itertools.product(range(m), repeat=dim)), dtype=np.intp).reshape(-1, dim)
        pts = nodes[idx]
        w = np.prod(weights[idx], axis=1)
    pts.flags.writeable = False
    w.flags.writeable = False
    return WeightedPoints(w, pts)


def unit_rule(rule: CubatureRule, dim: int, max_points: int = MAX_POINTS) -> WeightedPoints:
    return _unit_rule_cached(rule, int(dim), int(max_points))


def matrix_sqrt(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of S, with escalating diagonal jitter on failure."""
    S = np.asarray(S, dtype=float)
    if S.shape == (1, 1):
        if S[0, 0] > 0.0:
            return np.sqrt(S)
    else:
        try:
            return np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            pass
    n = S.shape[0]
    scale = np.trace(S) / n
    if not np.isfinite(scale) or scale <= 0.0:
        raise SqrtFailure("matrix has non-positive or non-finite trace")
    jitter = 1e-12
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(S + jitter * scale * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SqrtFailure("matrix square root failed after maximum jitter")


def sigma_points(mu: np.ndarray, S: np.ndarray, rule: CubatureRule):
    """Weights, points x_l = mu + sqrt(S) xi_l and offsets x_l - mu."""
    wp = unit_rule(rule, len(mu))
    if rule.is_mean_point:
        return wp.weights, mu[None, :].copy(), np.zeros((1, len(mu)))
    delta = wp.unit_points @ matrix_sqrt(S).T
    return wp.weights, mu + delta, delta


def sigma_points_batch(mu: np.ndarray, S: Optional[np.ndarray], rule: CubatureRule):
    """Stacked version of ``sigma_points``: mu (F, n), S (F, n, n).

    Returns weights (L,), points (F, L, n) and offsets (F, L, n).
    """
    F, n = mu.shape
    wp = unit_rule(rule, n)
    if rule.is_mean_point:
        return wp.weights, mu[:, None, :], np.zeros((F, 1, n))
    if n == 1:
        if np.all(S[:, 0, 0] > 0.0):
            root = np.sqrt(S)
        else:
            root = np.stack([matrix_sqrt(s) for s in S])
    else:
        try:
            root = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            root = np.stack([matrix_sqrt(s) for s in S])
    delta = np.einsum("li,fji->flj", wp.unit_points, root)
    return wp.weights, mu[:, None, :] + delta, delta


def check_finite(values: np.ndarray, what: str = "factor") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteFactor(f"{what} returned a non-finite value at a sigmapoint")
    return values


def expect_moments(phi: Callable, mu, S, rule: CubatureRule) -> FactorMoments:
    """Weighted sums for E[phi], E[(x-mu) phi] and E[(x-mu)(x-mu)ᵀ phi].

    ``phi`` maps an (L, n) array of points to (L,) values.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    S = np.atleast_2d(np.asarray(S, dtype=float))
    w, pts, delta = sigma_points(mu, S, rule)
    vals = check_finite(np.asarray(phi(pts), dtype=float).reshape(-1))
    wv = w * vals
    column = delta.T @ wv
    matrix = (delta.T * wv) @ delta
    return FactorMoments(float(wv.sum()), column, 0.5 * (matrix + matrix.T))
