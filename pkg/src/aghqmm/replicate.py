"""Simulation studies: repeated simulate-and-fit with bias and coverage summaries.

Replicate ``r`` draws from its own generator, the ``r``-th child of
``numpy.random.SeedSequence(seed)``, so results do not depend on how many
workers run or in what order they finish.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import SimSpec, simulate
from .errors import AghqError
from .optimizer import FitOptions, fit

logger = logging.getLogger(__name__)

REPLICATE_FIELDS = (
    "kind", "rep", "parameter", "true", "estimate", "se", "lower", "upper", "covered",
    "converged", "error",
)
SUMMARY_FIELDS = (
    "kind", "parameter", "true", "n_ok", "n_failed", "mean_estimate", "bias", "rel_bias",
    "coverage", "coverage_band_lo", "coverage_band_hi", "mean_length",
)


def true_values(spec):
    """Names and true values of the summarised targets, in output order."""
    names = [f"beta[{n}]" for n in spec.model_spec.fixed_names]
    values = list(spec.beta)
    Sigma = np.asarray(spec.Sigma)
    d = Sigma.shape[0]
    for i in range(d):
        for j in range(i, d):
            names.append(f"Sigma[{i},{j}]")
            values.append(float(Sigma[i, j]))
    return names, np.array(values)


@dataclass(frozen=True)
class ReplicateOutcome:
    rep: int
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    converged: bool
    error: str


def run_one(spec, k, rep, seed_seq, alpha=0.05, opts=None):
    """Simulate and fit one replicate; errors are captured, not raised."""
    names, _ = true_values(spec)
    nan = np.full(len(names), np.nan)
    try:
        data = simulate(spec, np.random.default_rng(seed_seq))
        opts = FitOptions(k=k) if opts is None else FitOptions(**{**opts.__dict__, "k": k})
        res = fit(data, "bernoulli", opts)
        if not res.hessian_pd:
            return ReplicateOutcome(rep, nan, nan, nan, nan, False, "Hessian not positive definite")
        wald = res.wald(alpha)
        sig = res.sigma(alpha)
        q = res.q
        ivs = list(wald.intervals[:q]) + [sig.intervals[key] for key in sorted(sig.intervals)]
        est = np.array([iv.estimate for iv in ivs])
        se = np.array([iv.se for iv in ivs])
        lo = np.array([iv.lower for iv in ivs])
        hi = np.array([iv.upper for iv in ivs])
        return ReplicateOutcome(rep, est, se, lo, hi, bool(res.converged), "" if res.converged else res.message)
    except AghqError as exc:
        logger.warning("replicate %d failed: %s", rep, exc)
        return ReplicateOutcome(rep, nan, nan, nan, nan, False, f"{type(exc).__name__}: {exc}")


def _run_star(args):
    return run_one(*args)


@dataclass(frozen=True)
class ReplicateStudy:
    spec: SimSpec
    k: int
    names: tuple
    truth: np.ndarray
    outcomes: tuple
    summary: tuple

    def summary_for(self, name):
        for row in self.summary:
            if row["parameter"] == name:
                return row
        raise KeyError(name)

    def rows(self):
        """Per-replicate rows followed by summary rows (dicts)."""
        out = []
        for o in self.outcomes:
            for j, name in enumerate(self.names):
                covered = "" if not np.isfinite(o.lower[j]) else int(o.lower[j] <= self.truth[j] <= o.upper[j])
                out.append({
                    "kind": "replicate", "rep": o.rep, "parameter": name, "true": self.truth[j],
                    "estimate": o.estimate[j], "se": o.se[j], "lower": o.lower[j], "upper": o.upper[j],
                    "covered": covered, "converged": int(o.converged), "error": o.error,
                })
        out.extend(self.summary)
        return out


def summarize(names, truth, outcomes):
    """Bias, relative bias, coverage (with a 2-se binomial band) and mean 4*se length.

    Only converged replicates enter the summary; the rest are counted in
    ``n_failed``.
    """
    ok = [o for o in outcomes if o.converged]
    rows = []
    for j, name in enumerate(names):
        est = np.array([o.estimate[j] for o in ok])
        se = np.array([o.se[j] for o in ok])
        cov = np.array([o.lower[j] <= truth[j] <= o.upper[j] for o in ok], dtype=float)
        B = len(ok)
        if B:
            mean_est = float(np.mean(est))
            phat = float(np.mean(cov))
            half = 2.0 * np.sqrt(phat * (1.0 - phat) / B)
            length = float(np.mean(4.0 * se))
        else:
            mean_est = phat = half = length = np.nan
        rows.append({
            "kind": "summary", "parameter": name, "true": float(truth[j]), "n_ok": B,
            "n_failed": len(outcomes) - B, "mean_estimate": mean_est, "bias": mean_est - truth[j],
            "rel_bias": mean_est / truth[j] if truth[j] != 0 else np.nan,
            "coverage": phat, "coverage_band_lo": phat - half, "coverage_band_hi": phat + half,
            "mean_length": length,
        })
    return tuple(rows)


def replicate(spec, k, reps, seed=None, workers=1, alpha=0.05, opts=None):
    """Run ``reps`` simulate-and-fit replicates of ``spec`` at ``k`` nodes per axis.

    ``seed`` defaults to ``spec.seed``.  With ``workers > 1`` replicates run
    in separate processes; results are identical to a serial run.
    """
    seed = spec.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(reps)
    jobs = [(spec, k, r, children[r], alpha, opts) for r in range(reps)]
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = tuple(pool.map(_run_star, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        outcomes = tuple(_run_star(j) for j in jobs)
    names, truth = true_values(spec)
    return ReplicateStudy(spec, k, tuple(names), truth, outcomes, summarize(names, truth, outcomes))
