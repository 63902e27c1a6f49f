"""Small dense linear algebra with derivative propagation.

Every routine accepts a single ``(d, d)`` matrix or a stack ``(..., d, d)``;
loops run over the (tiny) matrix dimension and vectorise over the stack.
"""

import numpy as np

from .errors import InvalidArgumentError, NotPositiveDefiniteError


def cholesky(H):
    """Lower Cholesky factor of a symmetric matrix (or stack of them).

    Only the lower triangle of ``H`` is read.

    Raises:
        NotPositiveDefiniteError: a pivot is not strictly positive; ``index``
            lists the offending stack positions.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim < 2 or H.shape[-1] != H.shape[-2]:
        raise InvalidArgumentError(f"expected square matrix, got shape {H.shape}")
    d = H.shape[-1]
    L = np.zeros_like(H)
    bad = np.zeros(H.shape[:-2], dtype=bool)
    for j in range(d):
        s = H[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        bad |= ~(s > 0.0)
        ljj = np.sqrt(np.where(s > 0.0, s, 1.0))
        L[..., j, j] = ljj
        for i in range(j + 1, d):
            L[..., i, j] = (H[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j], axis=-1)) / ljj
    if np.any(bad):
        idx = np.argwhere(bad) if bad.ndim else None
        raise NotPositiveDefiniteError("matrix is not positive definite", index=idx)
    return L


def forward_solve(L, z):
    """Solve ``L v = z`` by forward substitution."""
    L = np.asarray(L, dtype=float)
    v = np.array(z, dtype=float)
    d = L.shape[-1]
    for i in range(d):
        for j in range(i):
            v[..., i] = v[..., i] - L[..., i, j] * v[..., j]
        v[..., i] = v[..., i] / L[..., i, i]
    return v


def backward_solve(L, z):
    """Solve ``L^T v = z`` by backward substitution (``L`` lower triangular)."""
    L = np.asarray(L, dtype=float)
    v = np.array(z, dtype=float)
    d = L.shape[-1]
    for i in reversed(range(d)):
        for j in range(i + 1, d):
            v[..., i] = v[..., i] - L[..., j, i] * v[..., j]
        v[..., i] = v[..., i] / L[..., i, i]
    return v


def forward_solve_grad(L, z, r, s):
    """Forward substitution carrying the derivative with respect to ``L[r, s]``.

    Indices are 0-based with ``s <= r``.  Returns ``(v, g)`` where
    ``v = L^{-1} z`` and ``g = d v / d L[r, s]``.
    """
    L = np.asarray(L, dtype=float)
    d = L.shape[-1]
    if not (0 <= s <= r < d):
        raise InvalidArgumentError(f"(r, s) = ({r}, {s}) is not in the lower triangle of a {d}x{d} matrix")
    v = np.array(z, dtype=float)
    g = np.zeros_like(v)
    for i in range(d):
        for j in range(i):
            v[..., i] = v[..., i] - L[..., i, j] * v[..., j]
            g[..., i] = g[..., i] - L[..., i, j] * g[..., j]
            if i == r and j == s:
                g[..., i] = g[..., i] - v[..., j]
        v[..., i] = v[..., i] / L[..., i, i]
        g[..., i] = g[..., i] / L[..., i, i]
        if i == r == s:
            g[..., i] = g[..., i] - v[..., i] / L[..., i, i]
    return v, g


def backward_solve_grad(L, z, r, s):
    """Backward substitution for ``L^T v = z`` with ``d v / d L[r, s]``.

    Changing ``L[r, s]`` moves entry ``(s, r)`` of ``L^T``, which the sweep
    meets while solving row ``s``.
    """
    L = np.asarray(L, dtype=float)
    d = L.shape[-1]
    if not (0 <= s <= r < d):
        raise InvalidArgumentError(f"(r, s) = ({r}, {s}) is not in the lower triangle of a {d}x{d} matrix")
    v = np.array(z, dtype=float)
    g = np.zeros_like(v)
    for i in reversed(range(d)):
        for j in range(i + 1, d):
            v[..., i] = v[..., i] - L[..., j, i] * v[..., j]
            g[..., i] = g[..., i] - L[..., j, i] * g[..., j]
            if i == s and j == r:
                g[..., i] = g[..., i] - v[..., j]
        v[..., i] = v[..., i] / L[..., i, i]
        g[..., i] = g[..., i] / L[..., i, i]
        if i == r == s:
            g[..., i] = g[..., i] - v[..., i] / L[..., i, i]
    return v, g


def tri_inv(L):
    """Inverse of a lower-triangular matrix (stack), by forward substitution."""
    L = np.asarray(L, dtype=float)
    d = L.shape[-1]
    eye = np.broadcast_to(np.eye(d), L.shape)
    # columns of L^{-1} solve L x = e_c; solve all at once on the transposed layout
    return np.swapaxes(forward_solve(L[..., None, :, :], np.swapaxes(eye, -1, -2)), -1, -2)


def solve_spd(L, B):
    """Return ``(L L^T)^{-1} B`` via one forward and one backward substitution.

    ``B`` has shape ``(..., d)`` or ``(..., d, q)``.
    """
    L = np.asarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    d = L.shape[-1]
    if B.shape[-1] == d and B.ndim == L.ndim - 1:
        return backward_solve(L, forward_solve(L, B))
    if B.shape[-2] != d:
        raise InvalidArgumentError(f"dimension mismatch: L is {d}x{d}, B has shape {B.shape}")
    Bt = np.swapaxes(B, -1, -2)
    Lb = L[..., None, :, :]
    X = backward_solve(Lb, forward_solve(Lb, Bt))
    return np.swapaxes(X, -1, -2)


def logdet_chol(L):
    """log|L| = sum of log diagonal entries."""
    diag = np.diagonal(np.asarray(L, dtype=float), axis1=-2, axis2=-1)
    if np.any(diag <= 0.0):
        raise InvalidArgumentError("Cholesky factor has a non-positive diagonal entry")
    return np.sum(np.log(diag), axis=-1)


def chol_reverse_adjoint(L, F):
    """Reverse sweep through the Cholesky factorisation.

    Given ``F[j, l] = df/dL[j, l]`` (lower triangle), returns the lower
    triangular ``Abar`` with ``df = sum_{i >= j} Abar[i, j] dH[i, j]``.
    This is the unblocked backward sweep of the column-oriented factorisation.
    """
    L = np.asarray(L, dtype=float)
    Fb = np.tril(np.array(F, dtype=float))
    d = L.shape[-1]
    for k in reversed(range(d)):
        for j in reversed(range(k + 1, d)):
            for i in reversed(range(j, d)):
                Fb[..., i, k] -= Fb[..., i, j] * L[..., j, k]
                Fb[..., j, k] -= Fb[..., i, j] * L[..., i, k]
        for j in reversed(range(k + 1, d)):
            Fb[..., j, k] /= L[..., k, k]
            Fb[..., k, k] -= L[..., j, k] * Fb[..., j, k]
        Fb[..., k, k] = 0.5 * Fb[..., k, k] / L[..., k, k]
    return Fb


def chol_reverse(L, F, H_prime):
    """Derivatives of f(L(t)) along each slice of ``H_prime``.

    Args:
        L: lower Cholesky factor, ``(..., d, d)``.
        F: ``df/dL`` on the lower triangle, ``(..., d, d)``.
        H_prime: derivative stack ``(..., P, d, d)``; slice ``l`` is
            ``dH/dt_l``.

    Returns:
        ``(..., P)`` vector of ``d f(L(t)) / d t_l``.
    """
    L = np.asarray(L, dtype=float)
    F = np.asarray(F, dtype=float)
    H_prime = np.asarray(H_prime, dtype=float)
    d = L.shape[-1]
    if F.shape[-2:] != (d, d) or H_prime.shape[-2:] != (d, d):
        raise InvalidArgumentError(
            f"dimension mismatch: L {L.shape}, F {F.shape}, H_prime {H_prime.shape}"
        )
    abar = chol_reverse_adjoint(L, F)
    return np.einsum("...ij,...lij->...l", abar, np.tril(H_prime))
