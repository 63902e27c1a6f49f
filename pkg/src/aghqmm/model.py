"""Response families and per-group joint log-likelihood derivatives.

A group's joint log-likelihood is

    log pi_i(theta, u) = sum_j l(y_ij; eta_ij) + log g(u; delta, phi),
    eta_ij = x_ij^T beta + v_ij^T u,

with a canonical-link exponential-family response, so all derivatives in
``eta`` chain linearly through the design rows.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from . import refamily
from .errors import DataError, InvalidArgumentError
from .refamily import RePar, n_phi, n_sigma

# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


class Family:
    """Canonical-link response family with fixed dispersion."""

    name = "family"

    def eta_derivs(self, y, eta):
        """Per-observation ``(l, l', l'', l''')`` in ``eta``, vectorised."""
        raise NotImplementedError

    def eta_value_grad(self, y, eta):
        """``(l, l')`` only; families may override with something cheaper."""
        return self.eta_derivs(y, eta)[:2]

    def validate(self, y):
        if not np.all(np.isfinite(y)):
            raise DataError(f"{self.name}: responses must be finite")

    def glm_start(self, y, X):
        """Starting coefficients from the pooled no-random-effects fit."""
        return glm_newton(self, y, X)


class Bernoulli(Family):
    """Bernoulli with logit link.

    ``p`` and ``1 - p`` both come from ``e = exp(-|eta|)``, so neither is
    formed by cancellation and no overflow occurs at any ``eta``.
    """

    name = "bernoulli"

    def eta_derivs(self, y, eta):
        eta = np.asarray(eta, dtype=float)
        e = np.exp(-np.abs(eta))
        small = e / (1.0 + e)  # min(p, 1 - p)
        big = 1.0 - small
        pos = eta >= 0.0
        p = np.where(pos, big, small)
        q = np.where(pos, small, big)
        ll = y * eta - np.maximum(eta, 0.0) - np.log1p(e)
        pq = small * big
        return ll, y - p, -pq, pq * (p - q)

    def eta_value_grad(self, y, eta):
        eta = np.asarray(eta, dtype=float)
        e = np.exp(-np.abs(eta))
        r = 1.0 / (1.0 + e)
        p = np.where(eta >= 0.0, r, e * r)
        return y * eta - np.maximum(eta, 0.0) - np.log1p(e), y - p

    def validate(self, y):
        y = np.asarray(y)
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise DataError(f"bernoulli response must be 0 or 1; first offending row {bad[0]}")


class Gaussian(Family):
    """Gaussian with identity link and unit variance."""

    name = "gaussian"

    def eta_derivs(self, y, eta):
        eta = np.asarray(eta, dtype=float)
        r = y - eta
        return -0.5 * r * r - 0.5 * refamily.LOG_2PI, r, -np.ones_like(eta), np.zeros_like(eta)


class ExponentialFamily(Family):
    """Generic canonical exponential family ``exp{(y eta - b(eta))/phi} c(y)``.

    Args:
        b, b1, b2, b3: cumulant function and its first three derivatives.
        dispersion: fixed ``phi``.
        log_c: optional ``log c(y)``; defaults to zero.
    """

    def __init__(self, b, b1, b2, b3, dispersion=1.0, log_c=None, name="expfam"):
        self.b, self.b1, self.b2, self.b3 = b, b1, b2, b3
        self.dispersion = float(dispersion)
        self.log_c = log_c
        self.name = name

    def eta_derivs(self, y, eta):
        eta = np.asarray(eta, dtype=float)
        phi = self.dispersion
        ll = (y * eta - self.b(eta)) / phi
        if self.log_c is not None:
            ll = ll + self.log_c(y)
        return ll, (y - self.b1(eta)) / phi, -self.b2(eta) / phi, -self.b3(eta) / phi


def _softplus(x):
    return np.logaddexp(0.0, x)


def bernoulli_expfam():
    """The Bernoulli family written through its cumulant function."""

    def b2(x):
        return expit(x) * expit(-x)

    def b3(x):
        return b2(x) * (expit(-x) - expit(x))

    return ExponentialFamily(_softplus, expit, b2, b3, name="bernoulli-expfam")


def poisson():
    return ExponentialFamily(np.exp, np.exp, np.exp, np.exp, log_c=lambda y: -gammaln(y + 1.0),
                             name="poisson")


FAMILIES = {"bernoulli": Bernoulli, "gaussian": Gaussian, "poisson": poisson}


def get_family(family):
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[str(family).lower()]()
    except KeyError:
        raise InvalidArgumentError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


def eta_derivs(family, y, eta):
    return get_family(family).eta_derivs(y, eta)


def glm_newton(family, y, X, tol=1e-8, max_iter=25):
    """Pooled GLM by Newton-Raphson (IRLS) on the canonical link.

    Returns the coefficients, or zeros if the iteration fails to converge.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    q = X.shape[1]
    beta = np.zeros(q)
    if q == 0 or y.size == 0:
        return beta
    for _ in range(max_iter):
        _, l1, l2, _ = family.eta_derivs(y, X @ beta)
        grad = X.T @ l1
        info = (X.T * -l2) @ X
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            return np.zeros(q)
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return np.zeros(q)
        if np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(beta))):
            return beta
    return np.zeros(q)


# ---------------------------------------------------------------------------
# Data and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupData:
    y: np.ndarray  # (n_i,)
    X: np.ndarray  # (n_i, q)
    V: np.ndarray  # (n_i, d)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        V = np.asarray(self.V, dtype=float)
        X = X if X.ndim == 2 else X.reshape(y.size, -1)
        V = V if V.ndim == 2 else V.reshape(y.size, -1)
        if X.shape[0] != y.size or V.shape[0] != y.size:
            raise DataError(f"design rows ({X.shape[0]}, {V.shape[0]}) do not match {y.size} responses")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "V", V)

    @classmethod
    def empty(cls, q, d):
        return cls(np.zeros(0), np.zeros((0, q)), np.zeros((0, d)))

    @property
    def n(self):
        return self.y.size


@dataclass(frozen=True, eq=False)
class Dataset:
    """Grouped data stored as zero-padded arrays.

    ``y`` is ``(m, n_max)``, ``X`` is ``(m, n_max, q)``, ``V`` is
    ``(m, n_max, d)`` and ``mask`` flags real (non-padding) rows.
    """

    y: np.ndarray
    X: np.ndarray
    V: np.ndarray
    mask: np.ndarray
    fixed_names: tuple = ()
    random_names: tuple = ()
    group_labels: tuple = ()

    @classmethod
    def from_groups(cls, groups, fixed_names=None, random_names=None, group_labels=None):
        groups = list(groups)
        if not groups:
            raise DataError("dataset has no groups")
        q = groups[0].X.shape[1]
        d = groups[0].V.shape[1]
        for g in groups:
            if g.X.shape[1] != q or g.V.shape[1] != d:
                raise DataError("all groups must share the fixed and random design widths")
        m = len(groups)
        n_max = max(max(g.n for g in groups), 1)
        y = np.zeros((m, n_max))
        X = np.zeros((m, n_max, q))
        V = np.zeros((m, n_max, d))
        mask = np.zeros((m, n_max), dtype=bool)
        for i, g in enumerate(groups):
            y[i, : g.n] = g.y
            X[i, : g.n] = g.X
            V[i, : g.n] = g.V
            mask[i, : g.n] = True
        return cls(
            y, X, V, mask,
            tuple(fixed_names) if fixed_names is not None else tuple(f"x{j}" for j in range(q)),
            tuple(random_names) if random_names is not None else tuple(f"v{j}" for j in range(d)),
            tuple(group_labels) if group_labels is not None else tuple(range(m)),
        )

    @property
    def m(self):
        return self.y.shape[0]

    @property
    def q(self):
        return self.X.shape[2]

    @property
    def d(self):
        return self.V.shape[2]

    @property
    def sizes(self):
        return self.mask.sum(axis=1)

    @property
    def N(self):
        return int(self.mask.sum())

    @property
    def p(self):
        return self.q + n_sigma(self.d)

    def group(self, i):
        n = int(self.mask[i].sum())
        return GroupData(self.y[i, :n], self.X[i, :n], self.V[i, :n])

    def groups(self):
        return [self.group(i) for i in range(self.m)]

    def subset(self, idx):
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        return Dataset(self.y[idx], self.X[idx], self.V[idx], self.mask[idx],
                       self.fixed_names, self.random_names,
                       tuple(self.group_labels[i] for i in idx))

    def stacked(self):
        """Pooled ``(y, X)`` over real rows, for the GLM start."""
        return self.y[self.mask], self.X[self.mask]

    def param_names(self):
        names = [f"beta[{n}]" for n in self.fixed_names]
        names += [f"delta[{n}]" for n in self.random_names]
        rows, cols = refamily._phi_index(self.d)
        names += [f"phi[{self.random_names[i]},{self.random_names[j]}]" for i, j in zip(rows, cols)]
        return names

    def same_as(self, other):
        return (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.V, other.V)
            and np.array_equal(self.mask, other.mask)
            and tuple(self.fixed_names) == tuple(other.fixed_names)
            and tuple(self.random_names) == tuple(other.random_names)
            and tuple(map(str, self.group_labels)) == tuple(map(str, other.group_labels))
        )


@dataclass(frozen=True)
class ParamVector:
    """``theta = (beta, delta, phi)``; flattened in that order."""

    beta: np.ndarray
    repar: RePar

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)).reshape(-1))

    @property
    def q(self):
        return self.beta.size

    @property
    def d(self):
        return self.repar.d

    @property
    def p(self):
        return self.q + n_sigma(self.d)

    def flat(self):
        return np.concatenate([self.beta, self.repar.flat()])

    @classmethod
    def from_flat(cls, theta, q, d):
        theta = np.asarray(theta, dtype=float)
        if theta.size != q + n_sigma(d):
            raise InvalidArgumentError(f"theta has {theta.size} entries, expected {q + n_sigma(d)}")
        return cls(theta[:q], RePar.from_flat(theta[q:], d))


def as_flat(theta):
    if isinstance(theta, ParamVector):
        return theta.flat()
    return np.asarray(theta, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# Per-group joint log-likelihood
# ---------------------------------------------------------------------------


def _split(theta, q, d):
    theta = as_flat(theta)
    return theta[:q], theta[q : q + d], theta[q + d :]


@dataclass(frozen=True)
class JointBundle:
    value: float
    grad_theta: np.ndarray  # (p,) ordered (beta, delta, phi)
    grad_u: np.ndarray  # (d,)


def group_joint(family, theta, u, group):
    """log pi_i(theta, u) and its gradient in theta and u."""
    family = get_family(family)
    q, d = group.X.shape[1], group.V.shape[1]
    beta, delta, phi = _split(theta, q, d)
    u = np.asarray(u, dtype=float)
    eta = group.X @ beta + group.V @ u
    ll, l1, _, _ = family.eta_derivs(group.y, eta)
    gval, g_u, g_sigma = refamily.log_density_grad(u, delta, phi)
    return JointBundle(
        value=float(np.sum(ll) + gval),
        grad_theta=np.concatenate([group.X.T @ l1, g_sigma]),
        grad_u=group.V.T @ l1 + g_u,
    )


def group_hessian_blocks(family, theta, u, group):
    """``H = -d^2 log pi / du du^T`` and ``C = d^2 log pi / du dtheta^T`` (d x p)."""
    family = get_family(family)
    q, d = group.X.shape[1], group.V.shape[1]
    beta, delta, phi = _split(theta, q, d)
    u = np.asarray(u, dtype=float)
    par = RePar(delta, phi)
    _, _, l2, _ = family.eta_derivs(group.y, group.X @ beta + group.V @ u)
    P = par.precision()
    H = (group.V.T * -l2) @ group.V + P
    dP = refamily.precision_derivs(par)
    C = np.concatenate([(group.V.T * l2) @ group.X, -(dP @ u).T], axis=1)
    return H, C


def group_third_stack(family, theta, u, group):
    """Stack of ``dH/d(theta, u)_l``, shape ``(p + d, d, d)``; theta slices first."""
    family = get_family(family)
    q, d = group.X.shape[1], group.V.shape[1]
    beta, delta, phi = _split(theta, q, d)
    u = np.asarray(u, dtype=float)
    _, _, _, l3 = family.eta_derivs(group.y, group.X @ beta + group.V @ u)
    vv = group.V[:, :, None] * group.V[:, None, :]  # (n, d, d)
    wv = -l3[:, None, None] * vv
    d_beta = np.einsum("nij,nl->lij", wv, group.X)
    d_u = np.einsum("nij,nl->lij", wv, group.V)
    d_sigma = refamily.precision_derivs(RePar(delta, phi))
    return np.concatenate([d_beta, d_sigma, d_u], axis=0)
