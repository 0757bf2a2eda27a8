import numpy as np
import pytest

from esgvi.blockmat import BlockLayout, BlockSparseSym, PrecisionPattern, symbolic_fill


def random_block_spd(rng, max_blocks=12, max_dim=3, density=0.3, fill=True):
    """Random SPD matrix on a random block pattern (optionally fill-closed)."""
    n_blocks = int(rng.integers(1, max_blocks + 1))
    layout = BlockLayout(tuple(int(d) for d in rng.integers(1, max_dim + 1, size=n_blocks)))
    pairs = {(i, j) for i in range(n_blocks) for j in range(i) if rng.random() < density}
    pattern = PrecisionPattern(layout, frozenset(pairs))
    if fill:
        pattern = symbolic_fill(pattern)
    mask = pattern.to_dense_mask()
    n = layout.total_dim
    B = rng.normal(size=(n, n))
    A = np.where(mask, B + B.T, 0.0)
    # diagonal dominance keeps the masked matrix positive definite
    A += np.diag(np.abs(A).sum(axis=1) + 1.0)
    return BlockSparseSym.from_dense(pattern, A), A


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


def tridiag_3():
    layout = BlockLayout((1, 1, 1))
    pattern = PrecisionPattern(layout, frozenset({(1, 0), (2, 1)}))
    A = np.array([[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]])
    return BlockSparseSym.from_dense(pattern, A), A


def gaussian_monomial_moment(alpha):
    """E[prod xi_i^alpha_i] for xi ~ N(0, I): product of double factorials."""
    out = 1.0
    for a in alpha:
        if a % 2:
            return 0.0
        out *= float(np.prod(np.arange(a - 1, 0, -2))) if a else 1.0
    return out


def random_polynomial(rng, dim, degree):
    """Random coefficients over all monomials of total degree <= ``degree``."""
    from itertools import product
    alphas = [a for a in product(range(degree + 1), repeat=dim) if sum(a) <= degree]
    coefs = rng.normal(size=len(alphas))
    return np.array(alphas), coefs


def eval_polynomial(alphas, coefs, Z):
    """Evaluate at the rows of Z (L, dim)."""
    return (np.prod(Z[:, None, :] ** alphas[None, :, :], axis=2) * coefs).sum(axis=1)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


def central_difference(fn, x, rel_step=1e-6):
    """Central-difference Jacobian of ``fn`` at ``x`` with per-coordinate steps
    scaled to the variable magnitude."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def derivative_errors(factor, x):
    """Relative mismatch of analytic gradient and Hessian against differences."""
    phi = lambda v: factor.phi(v[None])[0]
    grad = lambda v: factor.grad(v[None])[0]
    g = grad(x)
    H = factor.hess(x[None])[0]
    g_fd = central_difference(phi, x)
    H_fd = central_difference(grad, x)
    eg = np.abs(g - g_fd).max() / max(np.abs(g).max(), 1e-8)
    eh = np.abs(H - H_fd).max() / max(np.abs(H).max(), 1e-8)
    return eg, eh


def builtin_factor_cases():
    """(name, factor, sampler) for every built-in factor kind; samplers draw
    points inside the factor's domain."""
    from esgvi.factors import (constant_velocity_factor, gaussian_prior_factor,
                               landmark_prior_factor, linear_factor, range_factor, stereo_factor)

    def normal(n, scale=3.0):
        return lambda r: scale * r.normal(size=n)

    def depth_1d(r):
        return np.array([r.uniform(5.0, 40.0)])

    def pos_landmark(r):
        p = r.normal(0.0, 5.0)
        return np.array([p, p + r.uniform(2.0, 30.0)])

    return [
        ("gaussian_prior", gaussian_prior_factor(0, [1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]]), normal(2)),
        ("landmark_prior", landmark_prior_factor(0, 15.0, 9.0), lambda r: r.normal(15.0, 3.0, 1)),
        ("constant_velocity", constant_velocity_factor(0, 1, 0.1, [[1.0]]), normal(4)),
        ("constant_velocity_2d", constant_velocity_factor(0, 1, 0.5, np.diag([1.0, 2.0])), normal(8)),
        ("stereo_1d", stereo_factor(None, 0, 2.1, 400.0, 0.1, 0.09), depth_1d),
        ("stereo", stereo_factor(0, 1, 2.6, 400.0, 0.1, 0.09), pos_landmark),
        ("range", range_factor(0, 1, 14.0, 0.09), normal(2)),
        ("linear", linear_factor((0, 1), [[1.0, 0.5, -1.0]], [0.2], [[0.4]]), normal(3)),
    ]


def polynomial_factor(variables, alphas, coefs):
    """Custom factor sum_a c_a x^a with exact analytic gradient and Hessian."""
    from esgvi.factors import custom_factor

    alphas = np.asarray(alphas)
    n = alphas.shape[1]

    def deriv(al, c, j):
        keep = al[:, j] > 0
        d = al[keep].copy()
        d[:, j] -= 1
        return d, c[keep] * al[keep, j]

    first = [deriv(alphas, coefs, j) for j in range(n)]
    second = [[deriv(*first[j], k) for k in range(n)] for j in range(n)]

    def phi(X):
        return eval_polynomial(alphas, coefs, X)

    def grad(X):
        return np.stack([eval_polynomial(a, c, X) for a, c in first], axis=1)

    def hess(X):
        return np.stack([np.stack([eval_polynomial(a, c, X) for a, c in row], axis=1)
                         for row in second], axis=1)

    return custom_factor(variables, phi, grad, hess)


def linear_chain(rng, K=6, noise=0.3):
    """Scalar random-walk chain with noisy direct measurements, built only from
    ``linear_factor`` so the dense posterior can be assembled independently."""
    from esgvi.blockmat import BlockLayout
    from esgvi.factors import FactorGraph, linear_factor

    facs = [linear_factor((0,), [[1.0]], [0.0], [[2.0]])]
    for k in range(1, K):
        facs.append(linear_factor((k - 1, k), [[-1.0, 1.0]], [rng.normal(0, 0.1)], [[0.5]]))
    for k in range(K):
        facs.append(linear_factor((k,), [[1.0]], [rng.normal(0, 1.0)], [[noise]]))
    graph = FactorGraph(BlockLayout((1,) * K), facs)
    return graph, dense_linear_posterior(graph)


def dense_linear_posterior(graph):
    n = graph.layout.total_dim
    P = np.zeros((n, n))
    b = np.zeros(n)
    for f, idx in zip(graph.factors, graph.factor_indices):
        C, y, Wi = f.params["C"], f.params["y"], f.kernel.info
        P[np.ix_(idx, idx)] += C.T @ Wi @ C
        b[idx] += C.T @ Wi @ y
    return np.linalg.solve(P, b), P


def convex_error_instance(rng, n_blocks=3, n_factors=4, width=0.5):
    """Small dense problem with errors e = y - (½ xᵀHx + bᵀx), H PSD, measured
    exactly at the current mean; Newton precision then dominates GN."""
    from esgvi.blockmat import BlockLayout, BlockSparseSym
    from esgvi.factors import FactorGraph, error_factor, gaussian_prior_factor
    from esgvi.solver import GaussianEstimate

    dims = tuple(int(d) for d in rng.integers(1, 3, size=n_blocks))
    layout = BlockLayout(dims)
    N = layout.total_dim
    mean = rng.normal(size=N)
    facs = [gaussian_prior_factor(k, np.zeros(d), np.eye(d) * 4.0) for k, d in enumerate(dims)]
    for _ in range(n_factors):
        vs = tuple(sorted(rng.choice(n_blocks, size=int(rng.integers(1, n_blocks + 1)), replace=False)))
        idx = layout.indices(vs)
        m = len(idx)
        G = rng.normal(size=(m, m)) * 0.3
        H = G @ G.T
        bvec = rng.normal(size=m)
        mu_k = mean[idx]
        y = 0.5 * mu_k @ H @ mu_k + bvec @ mu_k

        def err(X, H=H, bvec=bvec, y=y):
            return (y - 0.5 * np.einsum("li,ij,lj->l", X, H, X) - X @ bvec)[:, None]

        def jac(X, H=H, bvec=bvec):
            return -(X @ H + bvec)[:, None, :]

        def ehess(X, H=H, m=m):
            return np.broadcast_to(-H, (len(X), 1, m, m))

        facs.append(error_factor(vs, err, [[rng.uniform(0.2, 1.0)]], jac, ehess))
    graph = FactorGraph(layout, facs)
    S = np.diag(rng.uniform(0.5, 1.5, N)) * width
    est = GaussianEstimate(mean, BlockSparseSym.from_dense(graph.pattern, np.linalg.inv(S)))
    return graph, est


def em_chain(rng, K=500, w_true=0.3, step_sd=0.05):
    """Smooth random walk observed directly with noise of variance ``w_true``.

    The noise draw is standardised so its sample variance is exactly
    ``w_true``; the check then measures the estimator, not sampling error.
    Returns (graph, init, indices of the measurement factors).
    """
    from esgvi.blockmat import BlockLayout, BlockSparseSym
    from esgvi.factors import FactorGraph, linear_factor
    from esgvi.solver import GaussianEstimate

    x = np.cumsum(rng.normal(0.0, step_sd, K))
    noise = rng.normal(size=K)
    noise = (noise - noise.mean()) / noise.std() * np.sqrt(w_true)
    y = x + noise
    facs = [linear_factor((0,), [[1.0]], [0.0], [[4.0]])]
    facs += [linear_factor((k - 1, k), [[-1.0, 1.0]], [0.0], [[step_sd ** 2]]) for k in range(1, K)]
    meas = list(range(len(facs), len(facs) + K))
    facs += [linear_factor((k,), [[1.0]], [y[k]], [[2.0]]) for k in range(K)]
    graph = FactorGraph(BlockLayout((1,) * K), facs)
    return graph, GaussianEstimate(np.zeros(K), BlockSparseSym.identity(graph.pattern)), meas
