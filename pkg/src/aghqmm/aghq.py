"""Adaptive Gauss-Hermite approximate marginal likelihood and its exact gradient.

For group ``i`` with mode ``u_hat`` and ``H = L L^T = -d^2 log pi / du du^T``
at the mode, the per-group approximation is

    l_i(theta) = log sum_z omega(z) pi_i(theta, B z + u_hat) - log|L|

with ``B = L^{-T}`` (``node_map="backward"``, the default) or ``B = L^{-1}``
(``node_map="forward"``, forward substitution).  Only the backward map
sends a Gaussian integrand onto the Gauss-Hermite kernel, so it is exact for
Gaussian integrands at every k; the forward map is exact only at k = 1 and
is kept for comparison.

The gradient combines three pieces, each computed exactly:

* the direct (theta, u) derivative, a softmax-weighted average of the joint
  log-likelihood gradient over the shifted nodes;
* the dependence through ``L``, by reverse-mode differentiation of the
  Cholesky factorisation against the third-derivative stack ``dH/d(theta, u)``;
* the dependence through ``u_hat(theta)``, by implicit differentiation,
  ``H du_hat/dtheta = d^2 log pi / du dtheta``, applied as a solve followed
  by an inner product (the Jacobian is never formed).

All groups are processed together on zero-padded arrays.
"""

from dataclasses import dataclass

import numpy as np

from . import refamily, smallmat
from .errors import EvaluationError, InnerFailureError, InvalidArgumentError, NotPositiveDefiniteError
from .model import Dataset, as_flat, get_family
from .quadrature import adapt_rule
from .refamily import LOG_2PI, RePar, n_sigma

INNER_TOL = 1e-8
INNER_MAX_ITER = 50
INNER_MAX_HALVINGS = 30
# upper bound on m_chunk * n_nodes * n_max elements held at once
CHUNK_ELEMENTS = 2_000_000

NODE_MAPS = ("forward", "backward")


# Node-sized contractions below loop over the small dimension d and reduce
# with np.sum along a contiguous axis, so each group's result does not
# depend on how many groups share the batch.


def _bmv(A, B):
    """(m, K, d) x (m, n, d) -> (m, K, n), summing over d."""
    out = A[:, :, 0, None] * B[:, None, :, 0]
    for j in range(1, A.shape[2]):
        out += A[:, :, j, None] * B[:, None, :, j]
    return out


def _bvm(A, B):
    """(m, K, n) x (m, n, d) -> (m, K, d), summing over n."""
    return np.stack([np.sum(A * B[:, None, :, j], axis=2) for j in range(B.shape[2])], axis=-1)


def _rows_times(A, M):
    """Rows of A (m, K, d) times M (m, d, d): (m, K, i) = sum_j A[.., j] M[:, j, i]."""
    return _bmv(A, np.swapaxes(M, 1, 2))


def _outer_sum(A, B):
    """(m, K, d) x (m, K, e) -> (m, d, e), summing over K."""
    d, e = A.shape[2], B.shape[2]
    out = np.empty((A.shape[0], d, e))
    for i in range(d):
        for j in range(e):
            out[:, i, j] = np.sum(A[:, :, i] * B[:, :, j], axis=1)
    return out


@dataclass(frozen=True)
class GroupState:
    mode: np.ndarray
    chol: np.ndarray
    inner_iters: int


@dataclass(frozen=True)
class GroupStates:
    """Modes and Cholesky factors for every group (the warm-start cache)."""

    modes: np.ndarray  # (m, d)
    chols: np.ndarray  # (m, d, d)
    inner_iters: np.ndarray  # (m,)

    def __len__(self):
        return self.modes.shape[0]

    def __getitem__(self, i):
        return GroupState(self.modes[i], self.chols[i], int(self.inner_iters[i]))

    @property
    def total_inner_iters(self):
        return int(np.sum(self.inner_iters))


@dataclass(frozen=True)
class EvalOutput:
    value: float
    grad: np.ndarray
    states: GroupStates


def _split(theta, q, d):
    theta = as_flat(theta)
    if theta.size != q + n_sigma(d):
        raise InvalidArgumentError(f"theta has {theta.size} entries, expected {q + n_sigma(d)}")
    return theta[:q], theta[q : q + d], theta[q + d :]


def _modes_from(warm, m, d):
    if warm is None:
        return np.zeros((m, d))
    modes = warm.modes if isinstance(warm, GroupStates) else np.asarray(warm, dtype=float)
    if modes.shape != (m, d):
        raise InvalidArgumentError(f"warm-start modes have shape {modes.shape}, expected {(m, d)}")
    return modes


# ---------------------------------------------------------------------------
# Inner optimisation
# ---------------------------------------------------------------------------


class _Joint:
    """log pi_i(theta, u) for a block of groups at fixed theta."""

    def __init__(self, family, data, beta, delta, phi):
        self.family = family
        self.y = data.y
        self.V = data.V
        self.w = data.mask.astype(float)
        self.off = data.X @ beta
        self.delta = delta
        self.phi = phi
        self.P = RePar(delta, phi).precision()
        self.const = -0.5 * data.d * LOG_2PI + 0.5 * np.sum(delta)

    def value(self, u, idx):
        eta = self.off[idx] + np.einsum("mnd,md->mn", self.V[idx], u)
        ll = self.family.eta_value_grad(self.y[idx], eta)[0]
        return np.sum(self.w[idx] * ll, axis=1) + self.const - 0.5 * np.einsum("mi,ij,mj->m", u, self.P, u)

    def full(self, u):
        eta = self.off + np.einsum("mnd,md->mn", self.V, u)
        ll, l1, l2, _ = self.family.eta_derivs(self.y, eta)
        Pu = u @ self.P
        val = np.sum(self.w * ll, axis=1) + self.const - 0.5 * np.sum(u * Pu, axis=1)
        grad = np.einsum("mn,mnd->md", self.w * l1, self.V) - Pu
        H = np.einsum("mn,mni,mnj->mij", -self.w * l2, self.V, self.V) + self.P
        return val, grad, H


def _newton_modes(joint, u0, tol, max_iter, max_halvings, group_offset=0):
    u = np.array(u0, dtype=float)
    m = u.shape[0]
    iters = np.zeros(m, dtype=int)
    for it in range(max_iter + 1):
        val, grad, H = joint.full(u)
        gmax = np.max(np.abs(grad), axis=1) if u.shape[1] else np.zeros(m)
        bad = ~np.isfinite(val) | ~np.isfinite(gmax)
        if np.any(bad):
            raise InnerFailureError("non-finite joint log-likelihood", np.flatnonzero(bad) + group_offset)
        active = np.flatnonzero(gmax > tol)
        if active.size == 0:
            break
        if it == max_iter:
            raise InnerFailureError(
                f"inner Newton did not converge in {max_iter} iterations", active + group_offset
            )
        try:
            L = smallmat.cholesky(H[active])
        except NotPositiveDefiniteError as exc:
            raise InnerFailureError("joint Hessian not positive definite", active + group_offset) from exc
        step = smallmat.solve_spd(L, grad[active])
        pending = np.arange(active.size)
        t = 1.0
        for _ in range(max_halvings + 1):
            idx = active[pending]
            trial = u[idx] + t * step[pending]
            vnew = joint.value(trial, idx)
            old = val[idx]
            ok = np.isfinite(vnew) & (vnew >= old - 1e-12 * (1.0 + np.abs(old)))
            u[idx[ok]] = trial[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            t *= 0.5
        if pending.size:
            raise InnerFailureError("step halving failed in inner Newton", active[pending] + group_offset)
        iters[active] += 1
    # the Newton step at the accepted point is already in hand; taking it
    # drives the stationarity residual to rounding level at no extra cost
    L = smallmat.cholesky(H)
    u = u + smallmat.solve_spd(L, grad)
    return u, iters


def inner_modes(family, theta, data, warm=None, tol=INNER_TOL, max_iter=INNER_MAX_ITER):
    """Newton's method for every group's mode; returns ``(modes, iterations)``."""
    family = get_family(family)
    beta, delta, phi = _split(theta, data.q, data.d)
    u0 = _modes_from(warm, data.m, data.d)
    joint = _Joint(family, data, beta, delta, phi)
    return _newton_modes(joint, u0, tol, max_iter, INNER_MAX_HALVINGS)


def inner_newton(family, theta, group, u0=None, tol=INNER_TOL, max_iter=INNER_MAX_ITER):
    """Mode of one group's joint log-likelihood, as a GroupState."""
    data = Dataset.from_groups([group])
    warm = None if u0 is None else np.asarray(u0, dtype=float).reshape(1, -1)
    modes, iters = inner_modes(family, theta, data, warm, tol, max_iter)
    beta, delta, phi = _split(theta, data.q, data.d)
    _, _, H = _Joint(get_family(family), data, beta, delta, phi).full(modes)
    return GroupState(modes[0], smallmat.cholesky(H[0]), int(iters[0]))


# ---------------------------------------------------------------------------
# General-d evaluator
# ---------------------------------------------------------------------------


def _eval_block(family, beta, delta, phi, data, modes, rule, node_map):
    """Per-group values (m,), theta-gradients (m, p) and Cholesky factors."""
    m, n_max, q = data.X.shape
    d = data.d
    p = q + n_sigma(d)
    y, X, V = data.y, data.X, data.V
    w_obs = data.mask.astype(float)
    par = RePar(delta, phi)
    P = par.precision()
    dP = refamily.precision_derivs(par)

    # quantities at the mode
    off = X @ beta
    eta0 = off + np.einsum("mnd,md->mn", V, modes)
    _, _, l2, l3 = family.eta_derivs(y, eta0)
    l2 = w_obs * l2
    l3 = w_obs * l3
    H = np.einsum("mn,mni,mnj->mij", -l2, V, V) + P
    try:
        L = smallmat.cholesky(H)
    except NotPositiveDefiniteError as exc:
        raise EvaluationError("Hessian at the mode is not positive definite", np.ravel(exc.index)) from exc
    log_det = smallmat.logdet_chol(L)
    Linv = smallmat.tri_inv(L)

    # shifted nodes
    z = rule.points
    if node_map == "forward":
        shift = _bmv(np.broadcast_to(z, (m,) + z.shape), Linv)
    else:
        shift = _rows_times(np.broadcast_to(z, (m,) + z.shape), Linv)
    un = modes[:, None, :] + shift
    eta = off[:, None, :] + _bmv(un, V)
    ll, l1 = family.eta_value_grad(y[:, None, :], eta)
    ll = ll * w_obs[:, None, :]
    l1 = l1 * w_obs[:, None, :]
    gval, g_u, g_sigma = refamily.log_density_grad(un, delta, phi)
    logpi = np.sum(ll, axis=2) + gval
    v = logpi + rule.log_weights[None, :] - log_det[:, None]
    vmax = np.max(v, axis=1)
    if not np.all(np.isfinite(vmax)):
        raise EvaluationError("non-finite integrand at quadrature nodes", np.flatnonzero(~np.isfinite(vmax)))
    ev = np.exp(v - vmax[:, None])
    tot = np.sum(ev, axis=1)
    value = vmax + np.log(tot)
    wts = ev / tot[:, None]

    du = _bvm(l1, V) + g_u
    g1 = np.empty((m, p + d))
    g1[:, :q] = np.einsum("mn,mnq->mq", np.einsum("mk,mkn->mn", wts, l1), X)
    g1[:, q:p] = np.einsum("mk,mks->ms", wts, g_sigma)
    g1[:, p:] = np.einsum("mk,mkd->md", wts, du)

    # d/dL of the node sum: -1/L_jj on the diagonal plus the node-shift term
    if node_map == "forward":
        a = _rows_times(du, Linv)  # rows of L^{-T} du
        F = -_outer_sum(a * wts[:, :, None], shift)
    else:
        b = _bmv(du, Linv)  # rows of L^{-1} du
        F = -_outer_sum(shift * wts[:, :, None], b)
    F = np.tril(F)
    idx = np.arange(d)
    F[:, idx, idx] -= 1.0 / L[:, idx, idx]

    vv = V[:, :, :, None] * V[:, :, None, :]
    Hp = np.empty((m, p + d, d, d))
    Hp[:, :q] = -np.einsum("mn,mnij,mnl->mlij", l3, vv, X)
    Hp[:, q:p] = dP[None]
    Hp[:, p:] = -np.einsum("mn,mnij,mnl->mlij", l3, vv, V)
    g3 = g1 + smallmat.chol_reverse(L, F, Hp)

    C = np.empty((m, d, p))
    C[:, :, :q] = np.einsum("mn,mnd,mnq->mdq", l2, V, X)
    C[:, :, q:] = -np.einsum("sij,mj->mis", dP, modes)
    du_dtheta = smallmat.solve_spd(L, C)
    grad = g3[:, :p] + np.einsum("mdp,md->mp", du_dtheta, g3[:, p:])
    return value, grad, L


# ---------------------------------------------------------------------------
# Scalar (d = 1) evaluator
# ---------------------------------------------------------------------------


def _eval_block_scalar(family, beta, delta, data, modes, rule):
    m, n_max, q = data.X.shape
    p = q + 1
    y, X = data.y, data.X
    v1 = data.V[:, :, 0]
    w_obs = data.mask.astype(float)
    dl = float(delta[0])
    e = np.exp(dl)
    uh = modes[:, 0]

    off = X @ beta
    _, _, l2, l3 = family.eta_derivs(y, off + v1 * uh[:, None])
    l2 = w_obs * l2
    l3 = w_obs * l3
    Hs = np.sum(-l2 * v1 * v1, axis=1) + e
    if not np.all(Hs > 0.0):
        raise EvaluationError("Hessian at the mode is not positive", np.flatnonzero(~(Hs > 0.0)))
    Ls = np.sqrt(Hs)

    zk = rule.points[:, 0]
    t = zk[None, :] / Ls[:, None]
    un = uh[:, None] + t
    eta = off[:, None, :] + v1[:, None, :] * un[:, :, None]
    ll, l1 = family.eta_value_grad(y[:, None, :], eta)
    ll = ll * w_obs[:, None, :]
    l1 = l1 * w_obs[:, None, :]
    logpi = np.sum(ll, axis=2) - 0.5 * LOG_2PI + 0.5 * dl - 0.5 * e * un * un
    vals = logpi + rule.log_weights[None, :] - np.log(Ls)[:, None]
    vmax = np.max(vals, axis=1)
    if not np.all(np.isfinite(vmax)):
        raise EvaluationError("non-finite integrand at quadrature nodes", np.flatnonzero(~np.isfinite(vmax)))
    ev = np.exp(vals - vmax[:, None])
    tot = np.sum(ev, axis=1)
    value = vmax + np.log(tot)
    wts = ev / tot[:, None]

    du = np.sum(l1 * v1[:, None, :], axis=2) - e * un
    g_beta = ((wts[:, None, :] @ l1) @ X)[:, 0]
    g_delta = np.sum(wts * 0.5 * (1.0 - e * un * un), axis=1)
    g_u = np.sum(wts * du, axis=1)

    F11 = np.sum(wts * (-1.0 / Ls[:, None] - t / Ls[:, None] * du), axis=1)
    scale = F11 / (2.0 * Ls)
    hp_beta = -np.einsum("mn,mnq->mq", l3 * v1 * v1, X)
    hp_u = -np.sum(l3 * v1 ** 3, axis=1)
    g_beta = g_beta + scale[:, None] * hp_beta
    g_delta = g_delta + scale * e
    g_u = g_u + scale * hp_u

    c_beta = np.einsum("mn,mnq->mq", l2 * v1, X)
    c_delta = -e * uh
    grad = np.empty((m, p))
    grad[:, :q] = g_beta + (c_beta / Hs[:, None]) * g_u[:, None]
    grad[:, q] = g_delta + (c_delta / Hs) * g_u
    return value, grad, Ls.reshape(m, 1, 1)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def _chunks(m, n_nodes, n_max, chunk):
    if chunk is None:
        chunk = max(1, CHUNK_ELEMENTS // max(1, n_nodes * n_max))
    for start in range(0, m, chunk):
        yield slice(start, min(m, start + chunk))


def _evaluate(family, theta, data, k, warm, node_map, scalar, chunk):
    if node_map not in NODE_MAPS:
        raise InvalidArgumentError(f"node_map must be one of {NODE_MAPS}, got {node_map!r}")
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    family = get_family(family)
    d = data.d
    beta, delta, phi = _split(theta, data.q, d)
    rule = adapt_rule(d, k)
    u0 = _modes_from(warm, data.m, d)

    values = np.empty(data.m)
    grads = np.empty((data.m, data.p))
    modes = np.empty((data.m, d))
    chols = np.empty((data.m, d, d))
    iters = np.empty(data.m, dtype=int)
    for sl in _chunks(data.m, len(rule), data.y.shape[1], chunk):
        block = data.subset(np.arange(sl.start, sl.stop))
        joint = _Joint(family, block, beta, delta, phi)
        modes[sl], iters[sl] = _newton_modes(
            joint, u0[sl], INNER_TOL, INNER_MAX_ITER, INNER_MAX_HALVINGS, group_offset=sl.start
        )
        try:
            if scalar:
                values[sl], grads[sl], chols[sl] = _eval_block_scalar(family, beta, delta, block, modes[sl], rule)
            else:
                values[sl], grads[sl], chols[sl] = _eval_block(
                    family, beta, delta, phi, block, modes[sl], rule, node_map
                )
        except EvaluationError as exc:
            raise EvaluationError(str(exc), np.asarray(exc.groups, dtype=int) + sl.start) from exc
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(grads))):
        raise EvaluationError("non-finite value or gradient")
    return values, grads, GroupStates(modes, chols, iters)


def loglik_grad(family, theta, data, k, warm=None, node_map="backward", scalar=False, chunk=None):
    """Approximate log-marginal likelihood and gradient (not negated)."""
    values, grads, states = _evaluate(family, theta, data, k, warm, node_map, scalar, chunk)
    return EvalOutput(float(np.sum(values)), np.sum(grads, axis=0), states)


def nll_grad(family, theta, data, k, warm=None, node_map="backward", chunk=None):
    """Negative approximate log-marginal likelihood and its exact gradient.

    Inner modes start from ``warm`` (a GroupStates or an ``(m, d)`` array)
    when given, else from zero.
    """
    out = loglik_grad(family, theta, data, k, warm, node_map, scalar=False, chunk=chunk)
    return EvalOutput(-out.value, -out.grad, out.states)


def nll_grad_scalar(family, theta, data, k, warm=None, chunk=None):
    """Scalar-arithmetic evaluator for one-dimensional random effects."""
    if data.d != 1:
        raise InvalidArgumentError(f"scalar evaluator needs d = 1, got d = {data.d}")
    out = loglik_grad(family, theta, data, k, warm, scalar=True, chunk=chunk)
    return EvalOutput(-out.value, -out.grad, out.states)


def eval_group(family, theta, group, state, rule, node_map="backward"):
    """One group's ``(l_i, grad_i)`` at a precomputed mode (no inner Newton)."""
    data = Dataset.from_groups([group])
    beta, delta, phi = _split(theta, data.q, data.d)
    if rule.d != data.d:
        raise InvalidArgumentError(f"rule dimension {rule.d} does not match d = {data.d}")
    modes = np.asarray(state.mode if isinstance(state, GroupState) else state, dtype=float).reshape(1, -1)
    value, grad, _ = _eval_block(get_family(family), beta, delta, phi, data, modes, rule, node_map)
    return float(value[0]), grad[0]


class Evaluator:
    """Negative log-likelihood objective with warm-start bookkeeping.

    Calling ``ev(x, state)`` returns ``(f, g, new_state)``; ``state`` is the
    GroupStates of a previous evaluation (or None for a cold start).
    """

    def __init__(self, data, family, k, node_map="backward", scalar=None, warm_start=True, chunk=None):
        self.data = data
        self.family = get_family(family)
        self.k = int(k)
        self.node_map = node_map
        self.scalar = (data.d == 1) if scalar is None else bool(scalar)
        if self.scalar and data.d != 1:
            raise InvalidArgumentError("scalar evaluator needs d = 1")
        self.warm_start = warm_start
        self.chunk = chunk
        self.n_evals = 0
        self.inner_iters = 0

    def __call__(self, x, state=None):
        warm = state if self.warm_start else None
        self.n_evals += 1
        values, grads, states = _evaluate(
            self.family, x, self.data, self.k, warm, self.node_map, self.scalar, self.chunk
        )
        self.inner_iters += states.total_inner_iters
        return -float(np.sum(values)), -np.sum(grads, axis=0), states
