"""CSV ingestion and simulation of the two benchmark designs.

Simulation uses numpy's PCG64 generator (``numpy.random.default_rng``), so a
seed reproduces the same data on any platform with the same numpy version.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidArgumentError, NotPositiveDefiniteError
from .model import Dataset, GroupData, get_family
from .smallmat import cholesky

DESIGNS = ("eq5", "eq6")

DEFAULT_BETA = {
    "eq5": (-2.5, -0.15, 0.1, 0.2),
    "eq6": (-2.5, -0.15),
}
DEFAULT_SIGMA = {
    "eq5": ((2.0, 1.0), (1.0, 1.0)),
    "eq6": ((2.0,),),
}
SIM_COLUMNS = ("group", "y", "x", "t", "xt")


@dataclass(frozen=True)
class ModelSpec:
    """Which CSV columns feed the response, grouping and design matrices."""

    response: str
    group: str
    fixed: tuple = ()
    random: tuple = ()
    intercept: bool = True
    random_intercept: bool = True
    family: str = "bernoulli"
    k: int = 25
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if not (self.intercept or self.fixed):
            raise InvalidArgumentError("model has no fixed effects")
        if not (self.random_intercept or self.random):
            raise InvalidArgumentError("model has no random effects")

    @property
    def fixed_names(self):
        return (("(Intercept)",) if self.intercept else ()) + self.fixed

    @property
    def random_names(self):
        return (("(Intercept)",) if self.random_intercept else ()) + self.random


@dataclass(frozen=True)
class SimSpec:
    design: str = "eq5"
    m: int = 200
    n: int = 5
    beta: tuple = None
    Sigma: tuple = None
    seed: int = 1

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise InvalidArgumentError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.m < 1 or self.n < 1:
            raise InvalidArgumentError("m and n must be at least 1")
        beta = DEFAULT_BETA[self.design] if self.beta is None else self.beta
        Sigma = DEFAULT_SIGMA[self.design] if self.Sigma is None else self.Sigma
        beta = np.asarray(beta, dtype=float).reshape(-1)
        d = 2 if self.design == "eq5" else 1
        Sigma = np.asarray(Sigma, dtype=float).reshape(d, d)
        if beta.size != len(DEFAULT_BETA[self.design]):
            raise InvalidArgumentError(
                f"design {self.design} needs {len(DEFAULT_BETA[self.design])} fixed effects, got {beta.size}"
            )
        object.__setattr__(self, "beta", tuple(beta))
        object.__setattr__(self, "Sigma", tuple(map(tuple, Sigma)))

    @property
    def model_spec(self):
        if self.design == "eq5":
            return ModelSpec("y", "group", ("x", "t", "xt"), ("t",))
        return ModelSpec("y", "group", ("x",), ())


def simulate_columns(spec, rng=None):
    """Draw the column table (group, y, x, t, xt) for a simulation design.

    Group ``i`` has ``x_i = 1`` for the first half of the groups, times
    ``t_j`` on an equal grid over [-3, 3], ``u_i ~ N(0, Sigma)`` and
    Bernoulli responses on the logit scale.

    Raises:
        NotPositiveDefiniteError: ``Sigma`` is not positive definite.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    Sigma = np.asarray(spec.Sigma)
    if not np.allclose(Sigma, Sigma.T):
        raise NotPositiveDefiniteError("Sigma must be symmetric")
    C = cholesky(Sigma)
    m, n = spec.m, spec.n
    d = C.shape[0]
    t = np.linspace(-3.0, 3.0, n) if n > 1 else np.zeros(1)
    x = (np.arange(m) < (m + 1) // 2).astype(float)
    u = rng.standard_normal((m, d)) @ C.T
    beta = np.asarray(spec.beta)
    xs = np.repeat(x[:, None], n, axis=1)
    ts = np.broadcast_to(t, (m, n))
    if spec.design == "eq5":
        eta = beta[0] + beta[1] * xs + beta[2] * ts + beta[3] * xs * ts + u[:, :1] + u[:, 1:2] * ts
    else:
        eta = beta[0] + beta[1] * xs + u[:, :1]
    y = (rng.uniform(size=(m, n)) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    return {
        "group": np.repeat(np.arange(1, m + 1), n),
        "y": y.reshape(-1),
        "x": xs.reshape(-1),
        "t": ts.reshape(-1),
        "xt": (xs * ts).reshape(-1),
    }


def simulate(spec, rng=None):
    """Simulated Dataset for ``spec`` (see ``simulate_columns``)."""
    return build_dataset(simulate_columns(spec, rng), spec.model_spec)


def build_dataset(columns, spec):
    """Assemble a Dataset from a column table (dict of equal-length arrays)."""
    needed = [spec.response, spec.group, *spec.fixed, *spec.random]
    for name in needed:
        if name not in columns:
            raise DataError(f"missing column {name!r}")
    labels = list(columns[spec.group])
    if not labels:
        raise DataError("dataset has no rows")
    try:
        y = np.asarray(columns[spec.response], dtype=float)
        fixed = [np.asarray(columns[c], dtype=float) for c in spec.fixed]
        rand = [np.asarray(columns[c], dtype=float) for c in spec.random]
    except ValueError as exc:
        raise DataError(f"non-numeric value: {exc}") from exc
    get_family(spec.family).validate(y)
    N = y.size
    ones = [np.ones(N)]
    X = np.column_stack((ones if spec.intercept else []) + fixed)
    V = np.column_stack((ones if spec.random_intercept else []) + rand)
    order = {}
    for row, g in enumerate(labels):
        order.setdefault(g, []).append(row)
    groups = [GroupData(y[rows], X[rows], V[rows]) for rows in order.values()]
    return Dataset.from_groups(groups, spec.fixed_names, spec.random_names, tuple(order))


def read_csv(path):
    """Column table from a CSV file with a header row; values stay strings."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]
    cols = {h: [] for h in header}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(r)} fields, expected {len(header)}")
        for h, v in zip(header, r):
            cols[h].append(v.strip())
    return cols


def parse_dataset(path, spec):
    """Read a CSV file into a Dataset; groups are ordered by first appearance."""
    cols = read_csv(path)
    if not cols or not next(iter(cols.values())):
        raise DataError(f"{path}: no data rows")
    return build_dataset(cols, spec)


def write_csv(path, columns, order=SIM_COLUMNS):
    path = Path(path)
    names = [c for c in order if c in columns]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[c] for c in names)):
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
