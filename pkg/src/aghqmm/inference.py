"""Wald intervals and delta-method intervals for the covariance matrix."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import InvalidArgumentError, NotPositiveDefiniteError
from .refamily import RePar, n_sigma, precision_derivs


@dataclass(frozen=True)
class Interval:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float


@dataclass(frozen=True)
class IntervalSet:
    intervals: tuple
    alpha: float

    def __len__(self):
        return len(self.intervals)

    def __getitem__(self, i):
        return self.intervals[i]

    @property
    def lower(self):
        return np.array([iv.lower for iv in self.intervals])

    @property
    def upper(self):
        return np.array([iv.upper for iv in self.intervals])

    @property
    def se(self):
        return np.array([iv.se for iv in self.intervals])


@dataclass(frozen=True)
class SigmaEstimate:
    """Covariance estimate with intervals for the entries ``i <= j``.

    ``intervals`` maps ``(i, j)`` (0-based) to an Interval.
    """

    Sigma_hat: np.ndarray
    intervals: dict
    alpha: float


def z_value(alpha):
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


def wald_intervals(theta_hat, vcov, alpha=0.05, names=None):
    """``theta_j +/- z_{1-alpha/2} sqrt(vcov_jj)`` for each coordinate.

    Raises:
        NotPositiveDefiniteError: a diagonal entry of ``vcov`` is negative
            or not finite (the Hessian was not positive definite).
    """
    theta_hat = np.asarray(theta_hat, dtype=float).reshape(-1)
    vcov = np.asarray(vcov, dtype=float)
    var = np.diag(vcov)
    if not np.all(var >= 0.0):
        raise NotPositiveDefiniteError("covariance matrix has a negative or non-finite diagonal entry")
    z = z_value(alpha)
    se = np.sqrt(var)
    names = names if names is not None else [f"theta[{j}]" for j in range(theta_hat.size)]
    return IntervalSet(
        tuple(Interval(n, t, s, t - z * s, t + z * s) for n, t, s in zip(names, theta_hat, se)),
        alpha,
    )


def sigma_point(repar):
    """Covariance matrix ``(A D A^T)^{-1}`` by explicit inversion."""
    S = np.linalg.inv(repar.precision())
    return 0.5 * (S + S.T)


def sigma_jacobian(repar):
    """Derivatives of the covariance entries with respect to ``(delta, phi)``.

    Returns a dict mapping ``(i, j)``, ``i <= j``, to the length-``s`` vector
    ``dSigma_ij / d(delta, phi)``, from ``dSigma = -Sigma dP Sigma``.
    """
    S = sigma_point(repar)
    dS = -np.einsum("ab,lbc,cd->lad", S, precision_derivs(repar), S)
    d = repar.d
    return {(i, j): dS[:, i, j].copy() for i in range(d) for j in range(i, d)}


def sigma_intervals(repar, vcov_sigma, alpha=0.05):
    """Delta-method intervals for the covariance entries.

    Off-diagonal entries get symmetric Wald intervals.  Variances use the
    log scale, ``se(log s) = sqrt(Var(s)) / s``, and are exponentiated back,
    so their lower bounds stay positive.
    """
    vcov_sigma = np.asarray(vcov_sigma, dtype=float)
    s = n_sigma(repar.d)
    if vcov_sigma.shape != (s, s):
        raise InvalidArgumentError(f"expected a {s}x{s} covariance block, got {vcov_sigma.shape}")
    z = z_value(alpha)
    S = sigma_point(repar)
    out = {}
    for (i, j), J in sigma_jacobian(repar).items():
        var = float(J @ vcov_sigma @ J)
        if not var >= -1e-14 * max(1.0, S[i, j] ** 2):
            raise NotPositiveDefiniteError(f"negative delta-method variance for Sigma[{i},{j}]")
        se = np.sqrt(max(var, 0.0))
        est = float(S[i, j])
        name = f"Sigma[{i},{j}]"
        if i == j:
            se_log = se / est
            out[(i, j)] = Interval(name, est, se, est * np.exp(-z * se_log), est * np.exp(z * se_log))
        else:
            out[(i, j)] = Interval(name, est, se, est - z * se, est + z * se)
    return SigmaEstimate(S, out, alpha)


def repar_from_theta(theta, q, d):
    theta = np.asarray(theta, dtype=float)
    return RePar.from_flat(theta[q:], d)
