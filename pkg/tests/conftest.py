"""Shared fixtures and independent oracles.

The oracles here do not import anything from the package beyond the data
containers: densities, Cholesky factors and quadrature rules come from numpy
and scipy directly.
"""

import numpy as np
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from aghqmm.data import SimSpec, simulate
from aghqmm.model import Dataset, GroupData


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_covariance(rng, d):
    G = rng.normal(size=(d, d))
    return G @ G.T / d + 0.5 * np.eye(d)


def precision_params(Sigma):
    """(delta, phi) for a covariance matrix, via numpy's Cholesky of the precision."""
    P = np.linalg.inv(Sigma)
    L = np.linalg.cholesky(P)
    diag = np.diag(L)
    A = L / diag
    d = Sigma.shape[0]
    phi = [A[i, j] for j in range(d) for i in range(j + 1, d)]
    return 2.0 * np.log(diag), np.array(phi)


def random_dataset(rng, family="bernoulli", m=4, n=5, q=2, d=1, ragged=False):
    groups = []
    for i in range(m):
        ni = int(rng.integers(1, n + 1)) if ragged else n
        X = np.column_stack([np.ones(ni)] + [rng.normal(size=ni) for _ in range(q - 1)])
        V = np.column_stack([np.ones(ni)] + [rng.normal(size=ni) for _ in range(d - 1)])
        if family == "bernoulli":
            y = (rng.random(ni) < 0.4).astype(float)
        else:
            y = rng.normal(size=ni)
        groups.append(GroupData(y, X, V))
    return Dataset.from_groups(groups)


def random_theta(rng, q, d, scale=0.5):
    Sigma = random_covariance(rng, d)
    delta, phi = precision_params(Sigma)
    return np.concatenate([rng.normal(scale=scale, size=q), delta, phi])


def split_theta(theta, q, d):
    """beta and the covariance matrix, built with plain numpy."""
    beta = theta[:q]
    delta = theta[q:q + d]
    phi = theta[q + d:]
    A = np.eye(d)
    k = 0
    for j in range(d):
        for i in range(j + 1, d):
            A[i, j] = phi[k]
            k += 1
    P = A @ np.diag(np.exp(delta)) @ A.T
    return beta, np.linalg.inv(P)


def gaussian_marginal_loglik(theta, data):
    """Exact per-group log marginal likelihood of the unit-variance Gaussian LMM."""
    beta, Sigma = split_theta(theta, data.q, data.d)
    out = []
    for g in data.groups():
        cov = g.V @ Sigma @ g.V.T + np.eye(g.n)
        out.append(multivariate_normal(g.X @ beta, cov).logpdf(g.y) if g.n else 0.0)
    return np.array(out)


def joint_logpi(g, theta, U, d):
    """log pi(theta, u) for a Bernoulli group at many points U (npts, d)."""
    q = g.X.shape[1]
    beta, Sigma = split_theta(theta, q, d)
    eta = (g.X @ beta)[None, :] + U @ g.V.T
    ll = np.sum(g.y * eta - np.logaddexp(0.0, eta), axis=1)
    return ll + multivariate_normal(np.zeros(d), Sigma).logpdf(U).reshape(-1)


def dense_grid_loglik(data, theta, points=200_001, radius=25.0):
    """Per-group log integral by the trapezoid rule on a dense grid.

    For d = 1 a uniform grid of ``points`` nodes over [-radius, radius];
    for d = 2 a ``points x points`` tensor grid.
    """
    d = data.d
    g1 = np.linspace(-radius, radius, points)
    h = g1[1] - g1[0]
    if d == 1:
        U = g1[:, None]
    else:
        U = np.stack(np.meshgrid(g1, g1, indexing="ij"), -1).reshape(-1, 2)
    return np.array([logsumexp(joint_logpi(g, theta, U, d)) + d * np.log(h) for g in data.groups()])


def newton_mode(g, theta, d, iters=100):
    """Mode and negative Hessian of a Bernoulli group's joint log-likelihood."""
    q = g.X.shape[1]
    beta, Sigma = split_theta(theta, q, d)
    P = np.linalg.inv(Sigma)
    u = np.zeros(d)
    for _ in range(iters):
        eta = g.X @ beta + g.V @ u
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = g.V.T @ (g.y - p) - P @ u
        H = g.V.T @ (g.V * (p * (1 - p))[:, None]) + P
        step = np.linalg.solve(H, grad)
        u = u + step
        if np.max(np.abs(step)) < 1e-15:
            break
    eta = g.X @ beta + g.V @ u
    p = 1.0 / (1.0 + np.exp(-eta))
    H = g.V.T @ (g.V * (p * (1 - p))[:, None]) + P
    return u, H


def adapted_rule_loglik(data, theta, k):
    """Adaptive Gauss-Hermite value from hermgauss and numpy's Cholesky.

    Nodes ``u_hat + L^{-T} sqrt(2) x`` with ``H = L L^T``; weights carry the
    ``exp(x^T x)`` factor.  Independent of the package's quadrature code.
    """
    d = data.d
    x, w = hermgauss(k)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    X = np.stack([gr.reshape(-1) for gr in grids], -1)
    W = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
    logw = np.log(W) + np.sum(X * X, axis=1) + 0.5 * d * np.log(2.0)
    out = []
    for g in data.groups():
        u, H = newton_mode(g, theta, d)
        L = np.linalg.cholesky(H)
        U = u + np.linalg.solve(L.T, np.sqrt(2.0) * X.T).T
        out.append(logsumexp(joint_logpi(g, theta, U, d) + logw) - np.sum(np.log(np.diag(L))))
    return np.array(out)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


@pytest.fixture(scope="session")
def eq6_data():
    return simulate(SimSpec("eq6", 200, 5, seed=1))


@pytest.fixture(scope="session")
def eq5_data():
    return simulate(SimSpec("eq5", 200, 5, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
