"""Impression-level outcome models: OLS for log dwell, IRLS logistic for engagement.

Both models are fixed-effects only (no random terms, no participant dummies)
and report classical standard errors; output metadata flags that SEs are not
clustered by participant. The intercept is always included and listed first.

Coding conventions, applied by :func:`build_design`:

* ``engage``        engaged impressions +0.5, others -0.5
* ``credibility``   component-1 z-score of the post
* ``sensationalism``component-2 z-score of the post
* ``dwell``         natural-log adjusted dwell, z-scored over the analysis
                    sample (constants recorded in the design)
* interactions      elementwise products of the coded main-effect columns

The OLS response is natural-log adjusted dwell (not z-scored).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._numeric import normal_sf_two_sided, t_sf_two_sided
from .data import ImpressionRecord
from .features import PostScore

MAX_CONDITION = 1e10
IRLS_MAX_ITER = 100
IRLS_GRADIENT_TOL = 1e-8
IRLS_DEVIANCE_RTOL = 1e-10
SEPARATION_COEF_BOUND = 15.0

_MAIN_EFFECTS = ("engage", "credibility", "sensationalism", "dwell")


@dataclass(frozen=True)
class DesignSpec:
    """Which response and which coded predictor columns to build."""

    response: str
    predictors: tuple[str, ...]
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.response not in ("log_dwell", "engaged"):
            raise ValueError(f"unknown response {self.response!r}")
        for p in self.predictors:
            if p not in _MAIN_EFFECTS:
                raise ValueError(f"unknown predictor {p!r}")
        for a, b in self.interactions:
            if a not in self.predictors or b not in self.predictors:
                raise ValueError(
                    f"interaction {a}:{b} references an undeclared main effect"
                )

    def column_names(self) -> tuple[str, ...]:
        return (
            ("intercept",)
            + self.predictors
            + tuple(f"{a}:{b}" for a, b in self.interactions)
        )


def dwell_model_spec() -> DesignSpec:
    """Log-dwell OLS: engagement, credibility, sensationalism + engage interactions."""
    return DesignSpec(
        response="log_dwell",
        predictors=("engage", "credibility", "sensationalism"),
        interactions=(("engage", "credibility"), ("engage", "sensationalism")),
    )


def engagement_model_spec() -> DesignSpec:
    """Engagement logistic: z-scored log dwell, credibility, sensationalism + dwell interactions."""
    return DesignSpec(
        response="engaged",
        predictors=("dwell", "credibility", "sensationalism"),
        interactions=(("dwell", "credibility"), ("dwell", "sensationalism")),
    )


@dataclass(frozen=True)
class Design:
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]
    centering: dict

    @property
    def n(self) -> int:
        return self.X.shape[0]


def build_design(
    impressions: Sequence[ImpressionRecord],
    scores: Iterable[PostScore] | Mapping[str, PostScore],
    spec: DesignSpec,
    demean_by_participant: bool = False,
) -> Design:
    """Assemble the design matrix (intercept first, spec order) and response.

    ``demean_by_participant`` subtracts per-participant means from every
    non-intercept column (and from a log-dwell response), so estimates use
    within-participant variation only. Off by default.
    """
    if isinstance(scores, Mapping):
        score_map = dict(scores)
    else:
        score_map = {s.post_id: s for s in scores}
    missing = sorted({i.post_id for i in impressions if i.post_id not in score_map})
    if missing:
        raise ValueError(
            f"{len(missing)} post(s) lack component scores: "
            + ", ".join(missing[:10])
            + ("..." if len(missing) > 10 else "")
        )
    n = len(impressions)
    if n == 0:
        raise ValueError("no impressions in analysis sample")
    dwell_adj = np.empty(n)
    engaged = np.empty(n)
    cred = np.empty(n)
    sens = np.empty(n)
    for row, imp in enumerate(impressions):
        if imp.dwell_adjusted is None:
            raise ValueError("impressions must be pipeline output (dwell_adjusted set)")
        if imp.dwell_adjusted <= 0:
            raise ValueError(
                f"non-positive adjusted dwell {imp.dwell_adjusted} cannot be logged; "
                "was the floor rule applied?"
            )
        dwell_adj[row] = imp.dwell_adjusted
        engaged[row] = 1.0 if imp.engaged else 0.0
        s = score_map[imp.post_id]
        cred[row] = s.pc_scores[0]
        sens[row] = s.pc_scores[1]

    log_dwell = np.log(dwell_adj)
    centering: dict = {}
    columns: dict[str, np.ndarray] = {
        "engage": np.where(engaged > 0, 0.5, -0.5),
        "credibility": cred,
        "sensationalism": sens,
    }
    if "dwell" in spec.predictors:
        mu = log_dwell.mean()
        sd = log_dwell.std(ddof=1) if n > 1 else 0.0
        if sd == 0:
            raise ValueError("log dwell is constant; cannot z-score the dwell predictor")
        columns["dwell"] = (log_dwell - mu) / sd
        centering["log_dwell_mean"] = float(mu)
        centering["log_dwell_sd"] = float(sd)

    names = spec.column_names()
    X = np.empty((n, len(names)))
    X[:, 0] = 1.0
    for j, name in enumerate(names[1:], start=1):
        if ":" in name:
            a, b = name.split(":")
            X[:, j] = columns[a] * columns[b]
        else:
            X[:, j] = columns[name]

    y = log_dwell if spec.response == "log_dwell" else engaged
    if demean_by_participant:
        pids = np.array([imp.participant_id for imp in impressions])
        _, inverse, counts = np.unique(pids, return_inverse=True, return_counts=True)
        for j in range(1, len(names)):
            means = np.bincount(inverse, weights=X[:, j]) / counts
            X[:, j] = X[:, j] - means[inverse]
        if spec.response == "log_dwell":
            means = np.bincount(inverse, weights=y) / counts
            y = y - means[inverse]
        centering["demeaned_by_participant"] = True
    return Design(X=X, y=y, columns=names, centering=centering)


@dataclass(frozen=True)
class TermEstimate:
    term: str
    estimate: float
    se: float
    statistic: float
    p: float


@dataclass(frozen=True)
class RegressionFit:
    model: str
    terms: tuple[TermEstimate, ...]
    n: int
    metadata: dict = field(default_factory=dict)
    centering: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def term(self, name: str) -> TermEstimate:
        for t in self.terms:
            if t.term == name:
                return t
        raise KeyError(name)

    def estimates(self) -> dict[str, float]:
        return {t.term: t.estimate for t in self.terms}


def _check_rank(R: np.ndarray, columns: Sequence[str]) -> None:
    diag = np.abs(np.diag(R))
    top = diag.max() if diag.size else 0.0
    if top == 0 or np.any(diag < top / MAX_CONDITION):
        bad = [columns[j] for j in np.flatnonzero(diag < top / MAX_CONDITION)] or list(columns)
        raise ValueError(f"design is rank deficient; collinear column(s): {', '.join(bad)}")


def fit_ols(
    X: np.ndarray,
    y: np.ndarray,
    columns: Sequence[str],
    centering: dict | None = None,
) -> RegressionFit:
    """Least squares via QR with classical SEs and two-sided t p-values."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need n > k for OLS inference (n={n}, k={k})")
    Q, R = np.linalg.qr(X)
    _check_rank(R, columns)
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    sigma2 = rss / (n - k)
    Rinv = np.linalg.solve(R, np.eye(k))
    cov = sigma2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.diag(cov))
    # a perfect fit has zero residual variance and zero SEs
    tstat = np.empty(k)
    pvals = np.empty(k)
    for j in range(k):
        if se[j] > 0:
            tstat[j] = beta[j] / se[j]
            pvals[j] = t_sf_two_sided(tstat[j], n - k)
        else:
            tstat[j] = 0.0 if beta[j] == 0 else math.copysign(math.inf, beta[j])
            pvals[j] = 1.0 if beta[j] == 0 else 0.0
    tss = float(((y - y.mean()) ** 2).sum())
    terms = tuple(
        TermEstimate(columns[j], float(beta[j]), float(se[j]), float(tstat[j]), float(pvals[j]))
        for j in range(k)
    )
    return RegressionFit(
        model="ols",
        terms=terms,
        n=n,
        metadata={
            "r_squared": 1.0 - rss / tss if tss > 0 else float("nan"),
            "residual_sd": math.sqrt(sigma2),
            "df_resid": n - k,
            "se_type": "classical (not clustered by participant)",
        },
        centering=centering or {},
    )


def _binary_deviance(y: np.ndarray, eta: np.ndarray) -> float:
    # -2*loglik written to stay finite for extreme eta
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    columns: Sequence[str],
    centering: dict | None = None,
) -> RegressionFit:
    """Logistic ML via iteratively reweighted least squares with step-halving.

    Converges when the score gradient's max-abs falls below 1e-8 or the
    relative deviance change falls below 1e-10. Wald SEs come from the
    inverse observed information at the optimum; p-values are two-sided
    normal. Suspected separation (non-convergence or huge coefficients) is
    reported as a warning on the fit, not an exception.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("logistic response must be binary 0/1")
    n, k = X.shape
    Q, R = np.linalg.qr(X)
    _check_rank(R, columns)

    beta = np.zeros(k)
    # start the intercept at the empirical log odds when it is a constant column
    if np.all(X[:, 0] == 1.0):
        pbar = min(max(y.mean(), 1e-6), 1 - 1e-6)
        beta[0] = math.log(pbar / (1 - pbar))

    eta = X @ beta
    deviance = _binary_deviance(y, eta)
    converged = False
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p)
        w = np.clip(p * (1.0 - p), 1e-12, None)
        info = X.T @ (w[:, None] * X)
        step = np.linalg.solve(info, grad)

        # step-halving: accept the first step that does not increase deviance
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            cand_eta = X @ candidate
            cand_dev = _binary_deviance(y, cand_eta)
            if cand_dev <= deviance + 1e-12:
                break
            scale *= 0.5
        beta, eta = candidate, cand_eta
        prev_dev, deviance = deviance, cand_dev

        if np.max(np.abs(X.T @ (y - 1.0 / (1.0 + np.exp(-eta))))) < IRLS_GRADIENT_TOL:
            converged = True
            break
        if abs(prev_dev - deviance) < IRLS_DEVIANCE_RTOL * (abs(prev_dev) + 1e-30):
            converged = True
            break

    fit_warnings: list[str] = []
    if not converged:
        fit_warnings.append(f"IRLS did not converge in {IRLS_MAX_ITER} iterations")
    if np.max(np.abs(beta)) > SEPARATION_COEF_BOUND:
        fit_warnings.append(
            f"coefficient magnitude exceeds {SEPARATION_COEF_BOUND}; possible separation"
        )

    p = 1.0 / (1.0 + np.exp(-eta))
    w = np.clip(p * (1.0 - p), 1e-12, None)
    info = X.T @ (w[:, None] * X)
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    zstat = beta / se
    pvals = normal_sf_two_sided(zstat)
    terms = tuple(
        TermEstimate(columns[j], float(beta[j]), float(se[j]), float(zstat[j]), float(pvals[j]))
        for j in range(k)
    )
    return RegressionFit(
        model="logistic",
        terms=terms,
        n=n,
        metadata={
            "log_likelihood": -deviance / 2.0,
            "deviance": deviance,
            "iterations": iterations,
            "converged": converged,
            "se_type": "classical Wald (not clustered by participant)",
        },
        centering=centering or {},
        warnings=tuple(fit_warnings),
    )


def fit_design(design: Design, spec: DesignSpec) -> RegressionFit:
    if spec.response == "log_dwell":
        return fit_ols(design.X, design.y, design.columns, design.centering)
    return fit_logistic(design.X, design.y, design.columns, design.centering)


# ---------------------------------------------------------------------------
# Persistence / rendering


def fit_to_dict(fit: RegressionFit) -> dict:
    return {
        "model": fit.model,
        "n": fit.n,
        "terms": [
            {
                "term": t.term,
                "estimate": t.estimate,
                "se": t.se,
                "statistic": t.statistic,
                "p": t.p,
            }
            for t in fit.terms
        ],
        "metadata": fit.metadata,
        "centering": fit.centering,
        "warnings": list(fit.warnings),
    }


def save_fit(path: str | Path, fit: RegressionFit) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=2, sort_keys=True) + "\n")


def load_fit(path: str | Path) -> RegressionFit:
    d = json.loads(Path(path).read_text())
    if "terms" not in d or "model" not in d:
        raise ValueError(f"{path} is not a regression fit file")
    return RegressionFit(
        model=d["model"],
        terms=tuple(
            TermEstimate(t["term"], t["estimate"], t["se"], t["statistic"], t["p"])
            for t in d["terms"]
        ),
        n=d["n"],
        metadata=d.get("metadata", {}),
        centering=d.get("centering", {}),
        warnings=tuple(d.get("warnings", ())),
    )


def render_fit_table(fit: RegressionFit) -> str:
    """Aligned text table: term, estimate, SE, statistic, p."""
    stat_label = "t value" if fit.model == "ols" else "z value"
    header = ["term", "estimate", "SE", stat_label, "p"]
    rows = [
        [t.term, f"{t.estimate:.3f}", f"{t.se:.3f}", f"{t.statistic:.3f}", f"{t.p:.3f}"]
        for t in fit.terms
    ]
    widths = [max(len(header[j]), *(len(r[j]) for r in rows)) for j in range(5)]
    lines = [
        "  ".join(h.ljust(widths[j]) for j, h in enumerate(header)),
        "  ".join("-" * widths[j] for j in range(5)),
    ]
    for r in rows:
        lines.append("  ".join(r[j].ljust(widths[j]) for j in range(5)))
    lines.append(f"n = {fit.n}  model = {fit.model}")
    for w in fit.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)
