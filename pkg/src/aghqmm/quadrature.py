"""Gauss-Hermite rules and their adapted product extension.

The one-dimensional rule integrates against ``exp(-x**2)``.  The adapted
d-dimensional rule rescales the nodes by ``sqrt(2)`` and folds the Gaussian
kernel back into the weights, so that for a density ``f`` with mode ``u``
and negative log-Hessian ``L L^T``::

    int f(t) dt  ~=  |L|^{-1} sum_z omega(z) f(L^{-T} z + u)

(``aghq`` uses this map by default and also offers ``L^{-1} z``).
With one point per axis this collapses to the Laplace approximation,
``omega(0) = (2 pi)^{d/2}``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidArgumentError

MAX_POINTS_1D = 64
MAX_DIM = 5
# k**d above this is refused; 64**5 would need ~8 GB for the node array alone
MAX_TENSOR_POINTS = 5_000_000


@dataclass(frozen=True)
class QuadRule1D:
    k: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def log_weights(self):
        return np.log(self.weights)


@dataclass(frozen=True)
class AdaptedRuleD:
    """Product rule on ``Q(d, k)`` with log-scale adapted weights.

    ``points`` has shape ``(k**d, d)``; axis 0 varies slowest.
    """

    d: int
    k: int
    points: np.ndarray
    log_weights: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights)


def _hermite_orthonormal(x, k):
    """Orthonormal Hermite polynomials p_0..p_{k-1} at x (w.r.t. exp(-x^2)).

    Returns an array of shape (k, len(x)).
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((k,) + x.shape)
    out[0] = np.pi ** -0.25
    if k > 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for j in range(2, k):
        out[j] = np.sqrt(2.0 / j) * x * out[j - 1] - np.sqrt((j - 1) / j) * out[j - 2]
    return out


@lru_cache(maxsize=None)
def _gh_rule_cached(k):
    # nodes are the eigenvalues of the symmetric Jacobi matrix
    off = np.sqrt(np.arange(1, k) / 2.0)
    jacobi = np.diag(off, 1) + np.diag(off, -1)
    x = np.linalg.eigvalsh(jacobi)

    # One Newton correction on the roots of p_k, then weights from the
    # Christoffel function 1 / sum_j p_j(x)^2.  This keeps tiny tail weights
    # accurate in the relative sense, which the eigenvector route does not.
    if k > 1:
        p = _hermite_orthonormal(x, k + 1)
        # p_k'(x) = sqrt(2k) p_{k-1}(x)
        x = x - p[k] / (np.sqrt(2.0 * k) * p[k - 1])
    p = _hermite_orthonormal(x, k)
    w = 1.0 / np.sum(p * p, axis=0)

    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gh_rule_1d(k):
    """k-point Gauss-Hermite rule for the weight function exp(-x^2).

    Args:
        k: number of points, 1 <= k <= 64.

    Returns:
        QuadRule1D with ascending nodes.
    """
    if int(k) != k or not 1 <= k <= MAX_POINTS_1D:
        raise InvalidArgumentError(f"k must be an integer in [1, {MAX_POINTS_1D}], got {k!r}")
    x, w = _gh_rule_cached(int(k))
    return QuadRule1D(int(k), x, w)


@lru_cache(maxsize=None)
def _adapt_cached(d, k):
    rule = gh_rule_1d(k)
    z1 = np.sqrt(2.0) * rule.nodes
    lw1 = np.log(rule.weights)
    grids = np.meshgrid(*([z1] * d), indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=-1)
    lw_grids = np.meshgrid(*([lw1] * d), indexing="ij")
    log_w = sum(g.reshape(-1) for g in lw_grids)
    log_w = 0.5 * d * np.log(2.0) + log_w + 0.5 * np.sum(points * points, axis=1)
    points.setflags(write=False)
    log_w.setflags(write=False)
    return points, log_w


def adapt_rule(d, k):
    """Adapted product rule on Q(d, k) for integrating against N(0, I_d)-like kernels.

    Points are ``sqrt(2) * x`` for the 1-d Gauss-Hermite nodes ``x``; log
    weights are ``(d/2) log 2 + sum log w(x_a) + z^T z / 2``.
    """
    if int(d) != d or not 1 <= d <= MAX_DIM:
        raise InvalidArgumentError(f"d must be an integer in [1, {MAX_DIM}], got {d!r}")
    gh_rule_1d(k)
    if d * np.log(k) > np.log(MAX_TENSOR_POINTS):
        raise InvalidArgumentError(
            f"product rule with k={k}, d={d} has {k}**{d} points, more than {MAX_TENSOR_POINTS}"
        )
    points, log_w = _adapt_cached(int(d), int(k))
    return AdaptedRuleD(int(d), int(k), points, log_w)
