"""Outer maximisation of the approximate marginal likelihood.

Objectives follow one calling convention: ``fun(x, state) -> (f, g, state)``
where ``f`` is minimised, ``g`` is its gradient and ``state`` is opaque data
(the group modes, for the likelihood) handed back on the next call as a warm
start.  Raising an ``AghqError`` or returning a non-finite value marks the
trial point infeasible.
"""

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import smallmat
from .aghq import Evaluator
from .errors import AghqError, InvalidArgumentError, LineSearchError, NotPositiveDefiniteError
from .model import ParamVector, get_family, glm_newton
from .refamily import n_sigma

logger = logging.getLogger(__name__)

C1 = 1e-4
C2 = 0.9


@dataclass(frozen=True)
class FitOptions:
    k: int = 25
    lbfgs_memory: int = 10
    grad_tol: float = 1e-6
    max_outer: int = 500
    fd_eps: float = 1e-8
    polish_max: int = 10
    max_linesearch: int = 40
    node_map: str = "backward"
    warm_start: bool = True
    central_hessian: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if not self.fd_eps > 0:
            raise InvalidArgumentError("fd_eps must be positive")
        if self.lbfgs_memory < 1:
            raise InvalidArgumentError("lbfgs_memory must be at least 1")


@dataclass
class LbfgsTrace:
    x: np.ndarray
    f: float
    g: np.ndarray
    state: object
    iterations: int
    n_evals: int
    converged: bool
    message: str
    f_history: list = field(default_factory=list)


def _safe_eval(fun, x, state):
    try:
        f, g, st = fun(x, state)
    except AghqError as exc:
        logger.debug("infeasible trial point: %s", exc)
        return np.inf, None, None
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None, None
    return float(f), np.asarray(g, dtype=float), st


def _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    if a_lo == a_hi or not (np.isfinite(f_hi) and d_hi is not None and np.isfinite(d_hi)):
        return None
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    rad = d1 * d1 - d_lo * d_hi
    if rad < 0.0:
        return None
    d2 = np.copysign(np.sqrt(rad), a_hi - a_lo)
    den = d_hi - d_lo + 2.0 * d2
    if den == 0.0:
        return None
    return a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / den


def strong_wolfe(fun, x, f0, g0, direction, state, alpha0=1.0, c1=C1, c2=C2, max_trials=40):
    """Line search satisfying the strong Wolfe conditions.

    Bracketing phase followed by zoom with safeguarded cubic interpolation.
    Infeasible trials count as ``f = inf`` and are bisected away from.

    Returns ``(alpha, f, g, state, n_evals)``; raises LineSearchError with
    the lowest point seen when ``max_trials`` evaluations do not suffice.
    """
    dphi0 = float(g0 @ direction)
    if not dphi0 < 0.0:
        raise LineSearchError("not a descent direction", x, f0, g0, state)
    best = [f0, x, g0, state]
    n = 0

    def trial(alpha):
        nonlocal n
        n += 1
        xa = x + alpha * direction
        fa, ga, st = _safe_eval(fun, xa, state)
        da = float(ga @ direction) if ga is not None else None
        if fa < best[0]:
            best[:] = [fa, xa, ga, st]
        return fa, ga, st, da

    def zoom(lo, hi):
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi, d_hi = hi
        while n < max_trials:
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            width = a_hi - a_lo
            lo_b, hi_b = sorted((a_lo + 0.1 * width, a_hi - 0.1 * width))
            if a is None or not np.isfinite(a) or not lo_b <= a <= hi_b:
                a = 0.5 * (a_lo + a_hi)
            fa, ga, st, da = trial(a)
            if fa > f0 + c1 * a * dphi0 or fa >= f_lo:
                a_hi, f_hi, d_hi = a, fa, da
            else:
                if abs(da) <= -c2 * dphi0:
                    return a, fa, ga, st
                if da * (a_hi - a_lo) >= 0.0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, fa, da
        return None

    prev = (0.0, f0, dphi0)
    alpha = alpha0
    result = None
    for i in range(max_trials):
        fa, ga, st, da = trial(alpha)
        if fa > f0 + c1 * alpha * dphi0 or (i > 0 and fa >= prev[1]):
            result = zoom(prev, (alpha, fa, da))
            break
        if abs(da) <= -c2 * dphi0:
            result = (alpha, fa, ga, st)
            break
        if da >= 0.0:
            result = zoom((alpha, fa, da), prev)
            break
        prev = (alpha, fa, da)
        alpha *= 2.0
        if n >= max_trials:
            break
    if result is None:
        raise LineSearchError(f"strong Wolfe line search failed after {n} trials", best[1], best[0], best[2], best[3])
    a, fa, ga, st = result
    return a, fa, ga, st, n


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (a, rho) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_fit(fun, x0, opts=None, state=None, *, grad_tol=None, max_outer=None, memory=None):
    """Minimise ``fun`` by L-BFGS with a strong-Wolfe line search.

    Each accepted iterate's ``state`` warm-starts every trial of the next
    line search.  Stops when ``||g||_inf <= grad_tol * max(1, |f|)``.

    Raises:
        LineSearchError: the line search stalled, even after discarding the
            curvature memory; the error carries the best point found.
    """
    opts = opts or FitOptions()
    grad_tol = opts.grad_tol if grad_tol is None else grad_tol
    max_outer = opts.max_outer if max_outer is None else max_outer
    memory = opts.lbfgs_memory if memory is None else memory

    x = np.array(x0, dtype=float)
    f, g, state = fun(x, state)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise AghqError("objective is not finite at the starting point")
    n_evals = 1
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    history = [f]
    for it in range(max_outer):
        if np.max(np.abs(g)) <= grad_tol * max(1.0, abs(f)):
            return LbfgsTrace(x, f, g, state, it, n_evals, True, "gradient tolerance reached", history)
        direction = -_two_loop(g, S, Y)
        if not direction @ g < 0.0:
            S.clear(), Y.clear()
            direction = -g
        alpha0 = 1.0 if S else min(1.0, 1.0 / np.linalg.norm(g))
        try:
            alpha, f_new, g_new, st_new, n = strong_wolfe(
                fun, x, f, g, direction, state, alpha0, max_trials=opts.max_linesearch
            )
        except LineSearchError as exc:
            n_evals += opts.max_linesearch
            if not S:
                exc.args = (f"{exc.args[0]} (iteration {it})",)
                raise
            logger.debug("line search failed at iteration %d; restarting from steepest descent", it)
            S.clear(), Y.clear()
            continue
        n_evals += n
        s = alpha * direction
        yv = g_new - g
        if s @ yv > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
        x, f, g, state = x + s, f_new, g_new, st_new
        history.append(f)
    converged = np.max(np.abs(g)) <= grad_tol * max(1.0, abs(f))
    return LbfgsTrace(x, f, g, state, max_outer, n_evals, bool(converged),
                      "iteration limit reached", history)


def fd_jacobian(grad_fn, theta, eps=1e-8, central=False):
    """Finite-difference Jacobian of ``grad_fn``; column ``j`` perturbs ``theta_j``."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    J = np.empty((p, p))
    g0 = None if central else np.asarray(grad_fn(theta), dtype=float)
    for j in range(p):
        e = np.zeros(p)
        e[j] = eps
        if central:
            col = (np.asarray(grad_fn(theta + e)) - np.asarray(grad_fn(theta - e))) / (2.0 * eps)
        else:
            col = (np.asarray(grad_fn(theta + e)) - g0) / eps
        if not np.all(np.isfinite(col)):
            raise AghqError(f"non-finite Hessian column for coordinate {j}")
        J[:, j] = col
    return J


def fd_hessian(grad_fn, theta, eps=1e-8, central=False):
    """Symmetrised finite-difference Jacobian of an exact gradient."""
    J = fd_jacobian(grad_fn, theta, eps, central)
    return 0.5 * (J + J.T)


@dataclass
class PolishResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    state: object
    iterations: int
    skipped: bool
    message: str


def newton_polish(fun, H, x, f, g, state=None, max_iter=10, max_halvings=10):
    """Newton iterations with the fixed Hessian approximation ``H``.

    Stops when a step (after halving) no longer reduces ``||g||_inf``, when
    the step is negligible, or after ``max_iter`` iterations.
    """
    try:
        L = smallmat.cholesky(H)
    except NotPositiveDefiniteError:
        return PolishResult(x, f, g, state, 0, True, "Hessian not positive definite; polish skipped")
    x = np.asarray(x, dtype=float)
    it = 0
    message = "iteration limit reached"
    while it < max_iter:
        step = -smallmat.solve_spd(L, g)
        it += 1
        if np.max(np.abs(step)) <= 1e-10 * (1.0 + np.max(np.abs(x))):
            message = "step negligible"
            break
        gnorm = np.max(np.abs(g))
        t = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            f_new, g_new, st_new = _safe_eval(fun, x + t * step, state)
            if g_new is not None and np.max(np.abs(g_new)) < gnorm and f_new <= f + 1e-10 * (1.0 + abs(f)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            message = "gradient norm stopped decreasing"
            break
        x, f, g, state = x + t * step, f_new, g_new, st_new
    return PolishResult(x, f, g, state, it, False, message)


@dataclass(frozen=True)
class FitResult:
    theta_hat: ParamVector
    nll: float
    grad: np.ndarray
    grad_norm: float
    H_tilde: np.ndarray
    vcov: np.ndarray
    outer_iters: int
    total_inner_iters: int
    n_evals: int
    converged: bool
    hessian_pd: bool
    grad_norm_pre_polish: float
    polish_iters: int
    message: str
    k: int
    family: str
    param_names: tuple
    elapsed: float
    modes: np.ndarray = None

    @property
    def theta(self):
        return self.theta_hat.flat()

    @property
    def q(self):
        return self.theta_hat.q

    @property
    def d(self):
        return self.theta_hat.d

    def wald(self, alpha=0.05):
        from .inference import wald_intervals

        return wald_intervals(self.theta, self.vcov, alpha, names=self.param_names)

    def sigma(self, alpha=0.05):
        from .inference import sigma_intervals

        q = self.q
        block = self.vcov[q:, q:]
        return sigma_intervals(self.theta_hat.repar, block, alpha)


def _hessian(ev, x, state, opts):
    def grad_fn(t):
        return ev(t, state)[1]

    return fd_hessian(grad_fn, x, opts.fd_eps, opts.central_hessian)


def _invert(H):
    try:
        L = smallmat.cholesky(H)
    except NotPositiveDefiniteError:
        return np.full_like(H, np.nan), False
    vcov = smallmat.solve_spd(L, np.eye(H.shape[0]))
    return 0.5 * (vcov + vcov.T), True


def start_values(data, family):
    """Pooled-GLM ``beta`` with ``Sigma = I`` (delta = 0, phi = 0)."""
    y, X = data.stacked()
    beta0 = glm_newton(get_family(family), y, X)
    return np.concatenate([beta0, np.zeros(n_sigma(data.d))])


def fit(data, family="bernoulli", opts=None, theta0=None, **kwargs):
    """Maximum approximate marginal likelihood fit.

    Pipeline: pooled-GLM start, L-BFGS, finite-difference Hessian of the exact
    gradient, Newton polish, Hessian again at the polished point.  Failures
    after the start are reported through ``converged``/``message`` rather than
    raised.

    ``kwargs`` override fields of ``opts`` (e.g. ``fit(data, k=7)``).
    """
    t_start = time.perf_counter()
    opts = opts or FitOptions()
    if kwargs:
        opts = FitOptions(**{**opts.__dict__, **kwargs})
    family = get_family(family)
    family.validate(data.y[data.mask])
    ev = Evaluator(data, family, opts.k, node_map=opts.node_map, warm_start=opts.warm_start)
    if theta0 is None:
        x0 = start_values(data, family)
    elif isinstance(theta0, ParamVector):
        x0 = theta0.flat()
    else:
        x0 = ParamVector.from_flat(theta0, data.q, data.d).flat()
    messages = []
    try:
        trace = lbfgs_fit(ev, x0, opts)
        x, f, g, state = trace.x, trace.f, trace.g, trace.state
        outer, lbfgs_ok = trace.iterations, trace.converged
        messages.append(f"lbfgs: {trace.message}")
    except LineSearchError as exc:
        if exc.x is None or exc.g is None:
            raise
        x, f, g, state = exc.x, exc.f, exc.g, exc.state
        outer, lbfgs_ok = -1, False
        messages.append(f"lbfgs: {exc}")

    grad_pre = float(np.max(np.abs(g)))
    hessian_pd = True
    polish_iters = 0
    try:
        H = _hessian(ev, x, state, opts)
        pol = newton_polish(ev, H, x, f, g, state, max_iter=opts.polish_max)
        polish_iters = pol.iterations
        messages.append(f"polish: {pol.message}")
        if pol.skipped:
            hessian_pd = False
        elif not np.array_equal(pol.x, x):
            x, f, g, state = pol.x, pol.f, pol.g, pol.state
            H = _hessian(ev, x, state, opts)
        vcov, pd = _invert(H)
        hessian_pd = hessian_pd and pd
    except AghqError as exc:
        messages.append(f"hessian: {exc}")
        H = np.full((x.size, x.size), np.nan)
        vcov = H.copy()
        hessian_pd = False

    grad_norm = float(np.max(np.abs(g)))
    converged = bool(hessian_pd and grad_norm <= opts.grad_tol * (1.0 + abs(f)))
    if not converged and lbfgs_ok and not hessian_pd:
        messages.append("Hessian not positive definite at the optimum")
    return FitResult(
        theta_hat=ParamVector.from_flat(x, data.q, data.d),
        nll=float(f),
        grad=-np.asarray(g),
        grad_norm=grad_norm,
        H_tilde=H,
        vcov=vcov,
        outer_iters=int(outer),
        total_inner_iters=int(ev.inner_iters),
        n_evals=int(ev.n_evals),
        converged=converged,
        hessian_pd=bool(hessian_pd),
        grad_norm_pre_polish=grad_pre,
        polish_iters=int(polish_iters),
        message="; ".join(messages),
        k=opts.k,
        family=family.name,
        param_names=tuple(data.param_names()),
        elapsed=time.perf_counter() - t_start,
        modes=None if state is None else state.modes,
    )
