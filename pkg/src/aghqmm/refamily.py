"""Gaussian random effects under the inverse log-Cholesky parameterisation.

The precision is ``Sigma^{-1} = A D A^T`` with ``D = diag(exp(delta))`` and
``A`` unit lower triangular whose strict lower triangle holds ``phi`` in
column-major order.  Any real ``(delta, phi)`` gives an SPD precision, and
nothing here factorises or inverts a matrix.

Indices in this module are 0-based; ``phi_position`` also offers the
1-based convention used when talking about ``phi_1 = A_21``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidArgumentError

LOG_2PI = np.log(2.0 * np.pi)


def n_phi(d):
    return d * (d - 1) // 2


def n_sigma(d):
    return d * (d + 1) // 2


@lru_cache(maxsize=None)
def _phi_index(d):
    """(rows, cols) of phi_0..phi_{r-1} inside A, column-major."""
    rows, cols = [], []
    for j in range(d):
        for i in range(j + 1, d):
            rows.append(i)
            cols.append(j)
    rows = np.array(rows, dtype=int)
    cols = np.array(cols, dtype=int)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def phi_position(d, l):
    """Location ``(i, j)`` of ``phi_l`` in ``A``, both 1-based.

    Inverts ``l = d(j-1) - j(j-1)/2 + (i-j)`` by walking the strict lower
    triangle column by column.
    """
    r = n_phi(d)
    if not 1 <= l <= r:
        raise InvalidArgumentError(f"phi index {l} out of range 1..{r} for d={d}")
    i, j = 2, 1
    while j < d:
        if l == d * (j - 1) - j * (j - 1) // 2 + (i - j):
            return i, j
        i += 1
        if i > d:
            j += 1
            i = j + 1
    raise AssertionError("unreachable")  # pragma: no cover


@dataclass(frozen=True)
class RePar:
    """Unconstrained random-effects parameters ``(delta, phi)``."""

    delta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float)).reshape(-1)
        if phi.size != n_phi(delta.size):
            raise InvalidArgumentError(
                f"phi must have {n_phi(delta.size)} entries for d={delta.size}, got {phi.size}"
            )
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "phi", phi)

    @property
    def d(self):
        return self.delta.size

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.zeros(n_phi(d)))

    @classmethod
    def from_flat(cls, sigma, d):
        sigma = np.asarray(sigma, dtype=float)
        return cls(sigma[:d], sigma[d:])

    @classmethod
    def from_precision(cls, P):
        """Recover ``(delta, phi)`` from an SPD precision matrix.

        Uses ``P = A D A^T`` = (L D^{-1/2}) D (L D^{-1/2})^T with ``L`` the
        Cholesky factor of ``P``.
        """
        from .smallmat import cholesky

        L = cholesky(np.asarray(P, dtype=float))
        diag = np.diag(L)
        A = L / diag
        rows, cols = _phi_index(L.shape[0])
        return cls(2.0 * np.log(diag), A[rows, cols])

    @classmethod
    def from_covariance(cls, Sigma):
        return cls.from_precision(np.linalg.inv(np.asarray(Sigma, dtype=float)))

    def flat(self):
        return np.concatenate([self.delta, self.phi])

    def unit_lower(self):
        return unit_lower(self.phi, self.d)

    def precision(self):
        A = self.unit_lower()
        return (A * np.exp(self.delta)) @ A.T


def unit_lower(phi, d):
    A = np.eye(d)
    rows, cols = _phi_index(d)
    A[rows, cols] = phi
    return A


def selection_matrix(u):
    """``S(u)`` with ``A^T u = u + S(u) phi``; shape ``(..., d, r)``.

    Column ``l`` carries ``u_i`` in row ``j`` where ``(i, j)`` is the
    (0-based) position of ``phi_l``.
    """
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    rows, cols = _phi_index(d)
    S = np.zeros(u.shape + (rows.size,))
    S[..., cols, np.arange(rows.size)] = u[..., rows]
    return S


def selection_matrix_deriv(d, l):
    """``dS(u)/du_l`` (0-based ``l``): ones where ``selection_matrix`` places ``u_l``."""
    if not 0 <= l < d:
        raise InvalidArgumentError(f"u index {l} out of range 0..{d - 1}")
    rows, cols = _phi_index(d)
    dS = np.zeros((d, rows.size))
    hit = rows == l
    dS[cols[hit], np.flatnonzero(hit)] = 1.0
    return dS


def precision_derivs(par):
    """Derivatives of ``A D A^T`` with respect to ``delta`` then ``phi``.

    Returns an array of shape ``(d + r, d, d)``.
    """
    d = par.d
    A = par.unit_lower()
    e = np.exp(par.delta)
    out = np.empty((n_sigma(d), d, d))
    for l in range(d):
        out[l] = e[l] * np.outer(A[:, l], A[:, l])
    DAt = e[:, None] * A.T
    rows, cols = _phi_index(d)
    for l in range(rows.size):
        # (dA/dphi_l) D A^T: row `cols[l]` of D A^T copied into row `rows[l]`
        M = np.zeros((d, d))
        M[rows[l]] = DAt[cols[l]]
        out[d + l] = M + M.T
    return out


@dataclass(frozen=True)
class DensityBundle:
    """log g(u; delta, phi) with first and second derivatives.

    Cross blocks follow the layout ``[a, b]`` = d^2 log g / (da_i db_j).
    """

    value: float
    d_u: np.ndarray
    d_delta: np.ndarray
    d_phi: np.ndarray
    d2_uu: np.ndarray
    d2_delta: np.ndarray  # diagonal of the delta-delta block (off-diagonal is zero)
    d2_phiphi: np.ndarray
    d2_delta_u: np.ndarray  # (d, d): row j = d/d delta_j of d log g / du
    d2_phi_u: np.ndarray  # (r, d): column j = d/du_j of d log g / dphi
    d2_delta_phi: np.ndarray  # (d, r)

    @property
    def d_sigma(self):
        return np.concatenate([self.d_delta, self.d_phi])


def log_density_bundle(u, par):
    """Gaussian log density at ``u`` with every block of derivatives."""
    u = np.asarray(u, dtype=float)
    d = par.d
    r = n_phi(d)
    A = par.unit_lower()
    e = np.exp(par.delta)
    P = (A * e) @ A.T
    S = selection_matrix(u)
    w = u + S @ par.phi  # = A^T u
    Dw = e * w

    value = -0.5 * d * LOG_2PI + 0.5 * np.sum(par.delta) - 0.5 * np.dot(w, Dw)
    d_u = -(P @ u)
    d_delta = 0.5 * (1.0 - e * w * w)
    d_phi = -(Dw @ S)

    d2_delta = -0.5 * e * w * w
    d2_phiphi = -(S.T * e) @ S
    d2_delta_u = -(e * w)[:, None] * A.T
    d2_delta_phi = -(e * w)[:, None] * S

    DS = e[:, None] * S
    d2_phi_u = np.empty((r, d))
    for j in range(d):
        dS = selection_matrix_deriv(d, j)
        d2_phi_u[:, j] = -(u @ (e[:, None] * dS) + DS[j] + par.phi @ S.T @ (e[:, None] * dS)
                           + par.phi @ dS.T @ DS)

    return DensityBundle(
        value=float(value),
        d_u=d_u,
        d_delta=d_delta,
        d_phi=d_phi,
        d2_uu=-P,
        d2_delta=d2_delta,
        d2_phiphi=d2_phiphi,
        d2_delta_u=d2_delta_u,
        d2_phi_u=d2_phi_u,
        d2_delta_phi=d2_delta_phi,
    )


def log_density_grad(u, delta, phi):
    """Vectorised value and first derivatives at many points ``u`` (..., d).

    Returns ``(value, d_u, d_sigma)`` with ``d_sigma`` ordered ``(delta, phi)``.
    """
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    rows, cols = _phi_index(d)
    A = unit_lower(phi, d)
    e = np.exp(delta)
    w = u @ A  # rows of (A^T u)
    Dw = e * w
    value = -0.5 * d * LOG_2PI + 0.5 * np.sum(delta) - 0.5 * np.sum(w * Dw, axis=-1)
    d_u = -(Dw @ A.T)
    d_delta = 0.5 * (1.0 - Dw * w)
    d_phi = -Dw[..., cols] * u[..., rows]
    return value, d_u, np.concatenate([d_delta, d_phi], axis=-1)
