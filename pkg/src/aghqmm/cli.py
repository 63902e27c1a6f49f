"""Command-line interface: ``aghqmm fit | simulate | gradcheck | replicate``."""

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import __version__
from .aghq import nll_grad
from .data import SimSpec, ModelSpec, parse_dataset, simulate_columns, write_csv
from .errors import AghqError
from .inference import sigma_intervals, sigma_point, wald_intervals
from .optimizer import FitOptions, fit, start_values
from .replicate import REPLICATE_FIELDS, SUMMARY_FIELDS, replicate

FIT_SCHEMA = "aghqmm.fit/1"
GRADCHECK_SCHEMA = "aghqmm.gradcheck/1"
GRADCHECK_FAIL = 1e-5

logger = logging.getLogger("aghqmm")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip()) if text else ()


def _sigma_matrix(values, design):
    if values is None:
        return None
    v = np.asarray(values, dtype=float)
    if design == "eq6":
        if v.size != 1:
            raise AghqError("--sigma for eq6 takes one value (the variance)")
        return ((float(v[0]),),)
    if v.size == 3:
        return ((v[0], v[1]), (v[1], v[2]))
    if v.size == 4:
        return ((v[0], v[1]), (v[2], v[3]))
    raise AghqError("--sigma for eq5 takes 3 values (s11,s12,s22) or 4 (row-major 2x2)")


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _interval_json(iv, reason):
    out = {"name": iv.name, "estimate": _num(iv.estimate), "se": _num(iv.se),
           "lower": _num(iv.lower), "upper": _num(iv.upper)}
    if any(v is None for v in out.values()):
        out["reason"] = reason
    return out


def _null_interval(name, estimate, reason):
    return {"name": name, "estimate": _num(estimate), "se": None, "lower": None, "upper": None,
            "reason": reason}


def fit_report(res, data, alpha):
    """JSON-ready dict for a FitResult."""
    theta = res.theta
    names = list(res.param_names)
    reason = "Hessian not positive definite" if not res.hessian_pd else "non-finite value"
    sigma = res.theta_hat.repar
    if res.hessian_pd:
        params = [_interval_json(iv, reason) for iv in wald_intervals(theta, res.vcov, alpha, names)]
        sig = sigma_intervals(sigma, res.vcov[res.q:, res.q:], alpha)
        entries = [dict(i=i, j=j, **_interval_json(iv, reason)) for (i, j), iv in sorted(sig.intervals.items())]
        Sigma_hat = sig.Sigma_hat
    else:
        params = [_null_interval(n, t, reason) for n, t in zip(names, theta)]
        Sigma_hat = sigma_point(sigma)
        entries = [dict(i=i, j=j, **_null_interval(f"Sigma[{i},{j}]", Sigma_hat[i, j], reason))
                   for i in range(res.d) for j in range(i, res.d)]
    return {
        "schema": FIT_SCHEMA,
        "version": __version__,
        "converged": res.converged,
        "message": res.message,
        "family": res.family,
        "k": res.k,
        "alpha": alpha,
        "n_obs": data.N,
        "n_groups": data.m,
        "nll": _num(res.nll),
        "loglik": _num(-res.nll),
        "grad_norm": _num(res.grad_norm),
        "grad_norm_pre_polish": _num(res.grad_norm_pre_polish),
        "outer_iterations": res.outer_iters,
        "inner_iterations": res.total_inner_iters,
        "polish_iterations": res.polish_iters,
        "evaluations": res.n_evals,
        "elapsed_seconds": res.elapsed,
        "parameters": params,
        "random_effects": list(data.random_names),
        "Sigma": {"estimate": [[_num(v) for v in row] for row in Sigma_hat], "entries": entries},
    }


def gradient_check(data, family, k, theta, h=1e-6):
    """Exact gradient of the negative log-likelihood against central differences.

    The relative error of coordinate ``j`` is ``|g_j - fd_j| / max(1, |g_j|)``.
    """
    out = nll_grad(family, theta, data, k)
    g = out.grad
    fd = np.empty_like(g)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        fp = nll_grad(family, theta + e, data, k, warm=out.states).value
        fm = nll_grad(family, theta - e, data, k, warm=out.states).value
        fd[j] = (fp - fm) / (2.0 * h)
    rel = np.abs(g - fd) / np.maximum(1.0, np.abs(g))
    return g, fd, rel


def _model_spec(args):
    return ModelSpec(
        response=args.response, group=args.group, fixed=_names(args.fixed), random=_names(args.random),
        intercept=not args.no_intercept, random_intercept=not args.no_random_intercept,
        family=args.family, k=args.k, alpha=getattr(args, "alpha", 0.05),
    )


def cmd_fit(args):
    spec = _model_spec(args)
    data = parse_dataset(args.data, spec)
    res = fit(data, spec.family, FitOptions(k=spec.k))
    text = json.dumps(fit_report(res, data, spec.alpha), indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_simulate(args):
    spec = SimSpec(args.design, args.m, args.n, beta=_floats(args.beta) if args.beta else None,
                   Sigma=_sigma_matrix(_floats(args.sigma) if args.sigma else None, args.design), seed=args.seed)
    write_csv(args.out, simulate_columns(spec))
    return 0


def cmd_gradcheck(args):
    spec = _model_spec(args)
    data = parse_dataset(args.data, spec)
    theta = np.asarray(_floats(args.theta)) if args.theta else start_values(data, spec.family)
    if theta.size != data.p:
        raise AghqError(f"--theta needs {data.p} values, got {theta.size}")
    g, fd, rel = gradient_check(data, spec.family, spec.k, theta, args.h)
    names = data.param_names()
    width = max(len(n) for n in names)
    print(f"{'parameter':<{width}}  {'exact':>22}  {'finite-diff':>22}  {'rel-err':>10}")
    for n, a, b, r in zip(names, g, fd, rel):
        print(f"{n:<{width}}  {a:>22.15g}  {b:>22.15g}  {r:>10.3e}")
    worst = float(np.max(rel))
    print(f"max relative error: {worst:.3e}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"schema": GRADCHECK_SCHEMA, "version": __version__, "k": spec.k, "h": args.h,
                       "theta": theta.tolist(), "names": names, "exact": g.tolist(), "finite_difference": fd.tolist(),
                       "relative_error": rel.tolist(), "max_relative_error": worst}, fh, indent=2)
    return 0 if worst <= GRADCHECK_FAIL else 1


def cmd_replicate(args):
    spec = SimSpec(args.design, args.m, args.n, beta=_floats(args.beta) if args.beta else None,
                   Sigma=_sigma_matrix(_floats(args.sigma) if args.sigma else None, args.design), seed=args.seed)
    study = replicate(spec, args.k, args.reps, seed=args.seed, workers=args.threads, alpha=args.alpha)
    fields = list(dict.fromkeys(REPLICATE_FIELDS + SUMMARY_FIELDS))
    rows = study.rows()
    table = {f: [r.get(f, "") for r in rows] for f in fields}
    write_csv(args.out, table, order=fields)
    for row in study.summary:
        print(f"{row['parameter']:<20} true={row['true']:<8.4g} mean={row['mean_estimate']:<10.4g} "
              f"rel_bias={row['rel_bias']:<8.4g} coverage={row['coverage']:.3f} "
              f"[{row['coverage_band_lo']:.3f}, {row['coverage_band_hi']:.3f}] n_ok={row['n_ok']}")
    return 0


def _add_model_args(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--family", default="bernoulli", choices=["bernoulli", "gaussian"])
    p.add_argument("--response", required=True)
    p.add_argument("--group", required=True)
    p.add_argument("--fixed", default="", help="comma-separated fixed-effect columns")
    p.add_argument("--random", default="", help="comma-separated random-slope columns")
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--no-random-intercept", action="store_true")
    p.add_argument("--k", type=int, default=25, help="quadrature nodes per dimension")


def _add_sim_args(p):
    p.add_argument("--design", required=True, choices=["eq5", "eq6"])
    p.add_argument("--m", type=int, required=True, help="number of groups")
    p.add_argument("--n", type=int, required=True, help="observations per group")
    p.add_argument("--beta", help="comma-separated fixed effects")
    p.add_argument("--sigma", help="covariance entries: eq5 s11,s12,s22; eq6 the variance")
    p.add_argument("--seed", type=int, required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="aghqmm", description="Mixed-model fitting by adaptive Gauss-Hermite quadrature")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to CSV data")
    _add_model_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate a benchmark design to CSV")
    _add_sim_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="compare the exact gradient with finite differences")
    _add_model_args(p)
    p.add_argument("--h", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--theta", help="comma-separated parameter vector (default: starting values)")
    p.add_argument("--out", help="also write a JSON table here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replicate", help="run a simulation study")
    _add_sim_args(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AghqError, OSError) as exc:
        print(f"aghqmm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
