"""Random-effects meta-analysis: REML between-study variance, pooling,
confidence and prediction intervals, per-cluster subgroup analysis, and
weighted meta-regression.

The restricted log-likelihood is profiled over tau^2 on [0, tau2_max] with
tau2_max = 10 * max(sample variance of effects, max sampling variance),
maximized by a coarse scan plus golden-section refinement. The search runs
on variance-normalized data (divide variances by their maximum), which
keeps the estimate exactly equivariant under power-of-two rescaling of the
effect scale; the effective absolute tolerance is 1e-9 at unit variance
scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from ._util import write_json
from .clustering import ClusterAssignment
from .dataset import Dataset
from .errors import DataError

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_GOLDEN_TOL = 1e-9


@dataclass
class MetaResult:
    """Pooled random-effects summary for one group of studies."""

    n_studies: int
    tau2: float
    mu_hat: float
    se_mu: float
    level: float
    ci: tuple[float, float]
    pi: tuple[float, float] | None
    q_stat: float
    i2: float
    per_study: list[dict]  # {id, effect, variance, weight}; weights sum to 1


@dataclass
class Coefficient:
    name: str
    estimate: float
    se: float
    ci: tuple[float, float]


@dataclass
class MetaRegressionResult:
    coefficients: list[Coefficient]
    tau2: float
    n_studies: int
    level: float


@dataclass
class SubgroupReport:
    """Overall plus per-cluster meta-analyses; forest rows ordered clusters-then-overall."""

    overall: MetaResult
    per_cluster: dict[int, MetaResult]
    singletons: dict[int, dict]
    forest_rows: list[dict]
    level: float


def _validate(effects, variances, min_n: int = 2):
    y = np.asarray(effects, dtype=float).ravel()
    v = np.asarray(variances, dtype=float).ravel()
    if len(y) != len(v):
        raise ValueError(f"effects and variances differ in length: {len(y)} vs {len(v)}")
    if len(y) < min_n:
        raise ValueError(f"at least {min_n} studies required, got {len(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite effect")
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise ValueError("variances must be positive and finite")
    return y, v


def _restricted_loglik(tau2: float, y: np.ndarray, v: np.ndarray,
                       X: np.ndarray) -> float:
    w = 1.0 / (v + tau2)
    xtw = X.T * w
    xtwx = xtw @ X
    sign, logdet = np.linalg.slogdet(xtwx)
    if sign <= 0:
        return -np.inf
    beta = np.linalg.solve(xtwx, xtw @ y)
    resid = y - X @ beta
    return -0.5 * (np.log(v + tau2).sum() + logdet + (w * resid * resid).sum())


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 >= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INVPHI * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INVPHI * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def _profile_reml(y: np.ndarray, v: np.ndarray, X: np.ndarray
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Maximize the restricted log-likelihood over tau^2.

    Returns (tau2_hat, beta_hat, cov_beta) with the coefficient solve done at
    tau2_hat on the original scale.
    """
    scale = float(v.max())
    ys = y / math.sqrt(scale)
    vs = v / scale

    tau_max = 10.0 * max(float(np.var(y, ddof=1)), float(v.max()))
    t_max = tau_max / scale

    def f(t):
        return _restricted_loglik(t, ys, vs, X)

    best_t = 0.0
    if t_max > 0.0:
        grid = np.linspace(0.0, t_max, 257)
        values = np.array([f(t) for t in grid])
        i = int(values.argmax())
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, len(grid) - 1)]
        candidate = _golden_max(f, lo, hi, _GOLDEN_TOL)
        if f(candidate) > f(0.0):
            best_t = candidate

    tau2 = scale * best_t
    w = 1.0 / (v + tau2)
    xtw = X.T * w
    xtwx = xtw @ X
    beta = np.linalg.solve(xtwx, xtw @ y)
    cov = np.linalg.inv(xtwx)
    return tau2, beta, cov


def reml_tau2(effects, variances) -> float:
    """REML estimate of the between-study variance (clipped at 0)."""
    y, v = _validate(effects, variances)
    tau2, _, _ = _profile_reml(y, v, np.ones((len(y), 1)))
    return tau2


def pooled_effect(effects, variances, tau2: float) -> tuple[float, float]:
    """Inverse-variance pooled mean and its standard error at the given tau^2."""
    y, v = _validate(effects, variances)
    if tau2 < 0:
        raise ValueError("tau2 must be >= 0")
    w = 1.0 / (v + tau2)
    mu_hat = float((w * y).sum() / w.sum())
    se_mu = float(w.sum() ** -0.5)
    return mu_hat, se_mu


def intervals(mu_hat: float, se_mu: float, tau2: float, n: int,
              level: float = 0.95):
    """Wald confidence interval and (for n >= 3) the t-based prediction interval.

    The prediction interval uses n-2 degrees of freedom and the widened
    variance tau^2 + se^2, so it is absent when n < 3.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if n < 2:
        raise ValueError("n must be >= 2")
    z = float(stats.norm.ppf((1.0 + level) / 2.0))
    ci = (mu_hat - z * se_mu, mu_hat + z * se_mu)
    if n < 3:
        return ci, None
    t = float(stats.t.ppf((1.0 + level) / 2.0, n - 2))
    half = t * math.sqrt(tau2 + se_mu * se_mu)
    return ci, (mu_hat - half, mu_hat + half)


def heterogeneity_stats(effects, variances) -> tuple[float, float]:
    """Cochran's Q under fixed-effect weights and the I^2 percentage."""
    y, v = _validate(effects, variances)
    w = 1.0 / v
    ybar = float((w * y).sum() / w.sum())
    q = float((w * (y - ybar) ** 2).sum())
    n = len(y)
    i2 = 0.0 if q <= 0.0 else max(0.0, (q - (n - 1)) / q) * 100.0
    return q, i2


def meta_analysis(effects, variances, ids: Sequence[str] | None = None,
                  level: float = 0.95) -> MetaResult:
    """Full random-effects summary: REML tau^2, pooling, intervals, Q/I^2."""
    y, v = _validate(effects, variances)
    n = len(y)
    if ids is None:
        ids = [f"study {i}" for i in range(n)]
    tau2 = reml_tau2(y, v)
    mu_hat, se_mu = pooled_effect(y, v, tau2)
    ci, pi = intervals(mu_hat, se_mu, tau2, n, level)
    q, i2 = heterogeneity_stats(y, v)
    w = 1.0 / (v + tau2)
    w = w / w.sum()
    per_study = [{"id": str(sid), "effect": float(yi), "variance": float(vi),
                  "weight": float(wi)}
                 for sid, yi, vi, wi in zip(ids, y, v, w)]
    return MetaResult(n_studies=n, tau2=tau2, mu_hat=mu_hat, se_mu=se_mu,
                      level=level, ci=ci, pi=pi, q_stat=q, i2=i2,
                      per_study=per_study)


def _result_row(label: str, r: MetaResult) -> dict:
    return {"label": label, "n": r.n_studies, "mu_hat": r.mu_hat,
            "ci": list(r.ci), "pi": list(r.pi) if r.pi is not None else None,
            "tau2": r.tau2, "q": r.q_stat, "i2": r.i2, "pooled": True}


def subgroup_analysis(ds: Dataset, ca: ClusterAssignment,
                      level: float = 0.95) -> SubgroupReport:
    """Meta-analyze each cluster (own REML tau^2) and the full dataset.

    Clusters with a single study are reported as their raw effect with the
    study's own confidence interval, flagged and unpooled.
    """
    labels = np.asarray(ca.labels)
    if len(labels) != ds.m:
        raise ValueError(f"cluster labels cover {len(labels)} studies, dataset has {ds.m}")

    y = np.array([s.effect for s in ds.studies])
    v = np.array([s.variance for s in ds.studies])
    ids = ds.ids
    overall = meta_analysis(y, v, ids, level)

    per_cluster: dict[int, MetaResult] = {}
    singletons: dict[int, dict] = {}
    forest: list[dict] = []
    z = float(stats.norm.ppf((1.0 + level) / 2.0))
    for j in range(ca.k):
        members = np.flatnonzero(labels == j)
        if len(members) == 0:
            raise ValueError(f"cluster {j} is empty")
        if len(members) == 1:
            i = int(members[0])
            se = math.sqrt(v[i])
            row = {"label": f"cluster {j}", "n": 1, "mu_hat": float(y[i]),
                   "ci": [float(y[i] - z * se), float(y[i] + z * se)],
                   "pi": None, "tau2": None, "q": None, "i2": None,
                   "pooled": False, "flag": "singleton", "id": ids[i]}
            singletons[j] = row
            forest.append(row)
            continue
        result = meta_analysis(y[members], v[members],
                               [ids[i] for i in members], level)
        per_cluster[j] = result
        forest.append(_result_row(f"cluster {j}", result))
    forest.append(_result_row("overall", overall))

    return SubgroupReport(overall=overall, per_cluster=per_cluster,
                          singletons=singletons, forest_rows=forest, level=level)


def _design_matrix(ds: Dataset, moderators: Sequence[str]
                   ) -> tuple[np.ndarray, list[str]]:
    by_name = {spec.name: spec for spec in ds.schema}
    columns: list[np.ndarray] = [np.ones(ds.m)]
    names: list[str] = ["intercept"]
    for name in moderators:
        if name not in by_name:
            raise DataError(f"unknown moderator {name!r}")
        values = [s.value(name) for s in ds.studies]
        missing = [s.id for s, val in zip(ds.studies, values) if val is None]
        if missing:
            raise DataError(
                f"moderator {name!r} has missing values for studies: {missing}")
        if by_name[name].kind == "numeric":
            columns.append(np.asarray(values, dtype=float))
            names.append(name)
        else:
            levels = sorted(set(values))
            for lvl in levels[1:]:  # first level is the reference
                columns.append(np.array([1.0 if val == lvl else 0.0 for val in values]))
                names.append(f"{name}={lvl}")
    return np.column_stack(columns), names


def meta_regression(ds: Dataset, moderators: Sequence[str],
                    level: float = 0.95) -> MetaRegressionResult:
    """Mixed-effects meta-regression: REML residual tau^2, WLS coefficients.

    Categorical moderators are one-hot encoded with the first (sorted) level
    dropped. The design matrix must be full rank and n > p.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    X, names = _design_matrix(ds, moderators)
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more studies than coefficients: n={n}, p={p}")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        collinear = [names[j] for j in range(1, p)
                     if np.linalg.matrix_rank(X[:, :j + 1]) == np.linalg.matrix_rank(X[:, :j])]
        raise ValueError(f"design matrix is rank deficient; collinear columns: {collinear}")

    y, v = _validate([s.effect for s in ds.studies],
                     [s.variance for s in ds.studies])
    tau2, beta, cov = _profile_reml(y, v, X)
    z = float(stats.norm.ppf((1.0 + level) / 2.0))
    ses = np.sqrt(np.diag(cov))
    coefficients = [
        Coefficient(name=names[j], estimate=float(beta[j]), se=float(ses[j]),
                    ci=(float(beta[j] - z * ses[j]), float(beta[j] + z * ses[j])))
        for j in range(p)
    ]
    return MetaRegressionResult(coefficients=coefficients, tau2=tau2,
                                n_studies=n, level=level)


def subgroup_to_dict(report: SubgroupReport) -> dict:
    def result_dict(r: MetaResult) -> dict:
        return {
            "n_studies": r.n_studies, "tau2": r.tau2, "mu_hat": r.mu_hat,
            "se_mu": r.se_mu, "level": r.level, "ci": list(r.ci),
            "pi": list(r.pi) if r.pi is not None else None,
            "q": r.q_stat, "i2": r.i2, "per_study": r.per_study,
        }

    return {
        "level": report.level,
        "forest": report.forest_rows,
        "overall": result_dict(report.overall),
        "clusters": {str(j): result_dict(r) for j, r in report.per_cluster.items()},
        "singletons": {str(j): row for j, row in report.singletons.items()},
    }


def save_meta(report: SubgroupReport, path: str | Path) -> None:
    """Write meta.json: plot-ready forest rows plus the full per-group results."""
    write_json(path, subgroup_to_dict(report))
