"""Dwell-time preprocessing: exclusion rules, movement-time model, adjustment, floor.

Scrollable feeds couple dwell and engagement mechanically: acting on a post
takes motor time that inflates its dwell. The pipeline isolates the
attentional component in four ordered steps:

1. drop impressions dwelling past ``max_dwell`` (raw dwell), then trim the
   first/last ``edge_trim`` feed positions, whose timing is unreliable;
2. fit a hierarchical Gaussian model of raw dwell on action count with a
   random intercept and random slope per participant; the shrunken
   per-participant slope estimates each participant's seconds-per-action
   motor cost;
3. subtract ``slope * action_count`` from raw dwell (floored at 0);
4. drop impressions whose adjusted dwell falls below ``min_adjusted_dwell``
   (boundary value kept).

The mixed model is fit by deterministic EM to convergence (relative
log-likelihood change < 1e-8, at most 500 iterations); per-participant
coefficients are empirical-Bayes posterior means given the estimated
variance components. Identical inputs produce bit-identical fits.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, ImpressionRecord

EM_MAX_ITER = 500
EM_LL_RTOL = 1e-8
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class ExclusionRules:
    max_dwell: float = 30.0
    edge_trim: int = 3
    min_adjusted_dwell: float = 0.15

    def __post_init__(self):
        if self.max_dwell <= 0 or self.edge_trim <= 0 or self.min_adjusted_dwell <= 0:
            raise ValueError("exclusion rule thresholds must be positive")


@dataclass(frozen=True)
class PipelineAudit:
    """Per-rule removal counts; removals plus retained must equal the input."""

    input_count: int
    removed: dict[str, int]
    retained_count: int

    def __post_init__(self):
        if sum(self.removed.values()) + self.retained_count != self.input_count:
            raise ValueError("audit does not conserve impressions")


@dataclass(frozen=True)
class MovementModel:
    """Population and per-participant movement-time coefficients.

    ``participants`` maps participant_id -> (intercept, slope); the slope is
    that participant's estimated motor seconds per engagement action.
    """

    mu_alpha: float
    mu_beta: float
    tau_alpha: float
    tau_beta: float
    sigma_eps: float
    participants: dict[str, tuple[float, float]]
    log_likelihood: float = float("nan")
    iterations: int = 0

    def slope(self, participant_id: str) -> float:
        return self.participants[participant_id][1]


class PipelineOrderError(RuntimeError):
    """An impression reached adjustment without a fitted participant."""


# ---------------------------------------------------------------------------
# Exclusion stages


def _feed_lengths(impressions: Sequence[ImpressionRecord]) -> dict[str, int]:
    # length of the feed as displayed: max position seen for the participant
    lengths: dict[str, int] = {}
    for imp in impressions:
        lengths[imp.participant_id] = max(lengths.get(imp.participant_id, 0), imp.position)
    return lengths


def apply_exclusions_stage1(
    impressions: Sequence[ImpressionRecord], rules: ExclusionRules
) -> tuple[list[ImpressionRecord], PipelineAudit]:
    """Drop over-cap raw dwells, then edge positions of each participant's feed."""
    lengths = _feed_lengths(impressions)
    short = sorted(
        pid for pid, n in lengths.items() if n <= 2 * rules.edge_trim
    )
    if short:
        warnings.warn(
            f"{len(short)} participant(s) have feeds of <= {2 * rules.edge_trim} posts; "
            f"all their impressions fall in the trimmed edges: {', '.join(short[:5])}"
            + ("..." if len(short) > 5 else "")
        )
    kept: list[ImpressionRecord] = []
    n_over = 0
    n_edge = 0
    for imp in impressions:
        if imp.dwell_raw > rules.max_dwell:
            n_over += 1
            continue
        if imp.position <= rules.edge_trim or imp.position > lengths[imp.participant_id] - rules.edge_trim:
            n_edge += 1
            continue
        kept.append(imp)
    audit = PipelineAudit(
        input_count=len(impressions),
        removed={"over_max_dwell": n_over, "edge_positions": n_edge},
        retained_count=len(kept),
    )
    return kept, audit


def adjust_dwell(
    impressions: Sequence[ImpressionRecord], model: MovementModel
) -> list[ImpressionRecord]:
    """Subtract the participant's motor cost per action from raw dwell.

    Zero-action impressions pass through with dwell_adjusted == dwell_raw
    exactly; negative adjusted values are floored at 0 (the minimum-dwell
    rule removes them next).
    """
    adjusted: list[ImpressionRecord] = []
    for imp in impressions:
        if imp.participant_id not in model.participants:
            raise PipelineOrderError(
                f"participant {imp.participant_id!r} missing from movement model; "
                "adjust_dwell must run on the impressions the model was fit to"
            )
        a = imp.action_count
        if a == 0:
            value = imp.dwell_raw
        else:
            value = max(0.0, imp.dwell_raw - model.slope(imp.participant_id) * a)
        adjusted.append(replace(imp, dwell_adjusted=value))
    return adjusted


def apply_floor(
    impressions: Sequence[ImpressionRecord], rules: ExclusionRules
) -> tuple[list[ImpressionRecord], PipelineAudit]:
    """Drop impressions with adjusted dwell strictly below the floor."""
    kept = []
    removed = 0
    for imp in impressions:
        if imp.dwell_adjusted is None:
            raise PipelineOrderError("apply_floor requires adjusted impressions")
        if imp.dwell_adjusted < rules.min_adjusted_dwell:
            removed += 1
        else:
            kept.append(imp)
    audit = PipelineAudit(
        input_count=len(impressions),
        removed={"below_min_adjusted": removed},
        retained_count=len(kept),
    )
    return kept, audit


# ---------------------------------------------------------------------------
# Movement-time model (random-intercept, random-slope EM)


def _grouped_stats(impressions: Sequence[ImpressionRecord]):
    """Per-participant sufficient statistics, ordered by participant id."""
    pids = sorted({imp.participant_id for imp in impressions})
    index = {pid: i for i, pid in enumerate(pids)}
    g = np.fromiter((index[imp.participant_id] for imp in impressions), dtype=int)
    y = np.fromiter((imp.dwell_raw for imp in impressions), dtype=float)
    a = np.fromiter((imp.action_count for imp in impressions), dtype=float)
    m = len(pids)
    n_i = np.bincount(g, minlength=m).astype(float)
    sum_a = np.bincount(g, weights=a, minlength=m)
    sum_a2 = np.bincount(g, weights=a * a, minlength=m)
    sum_y = np.bincount(g, weights=y, minlength=m)
    sum_y2 = np.bincount(g, weights=y * y, minlength=m)
    sum_ay = np.bincount(g, weights=a * y, minlength=m)
    return pids, n_i, sum_a, sum_a2, sum_y, sum_y2, sum_ay, y, a


def _pooled_ols(n, sum_a, sum_a2, sum_y, sum_ay, sum_y2):
    N = n.sum()
    A = sum_a.sum()
    A2 = sum_a2.sum()
    Y = sum_y.sum()
    AY = sum_ay.sum()
    det = N * A2 - A * A
    if det <= 0:
        # no action variation: intercept-only
        mu = np.array([Y / N, 0.0])
    else:
        mu = np.array([(A2 * Y - A * AY) / det, (N * AY - A * Y) / det])
    rss = (
        sum_y2.sum()
        - 2 * (mu[0] * Y + mu[1] * AY)
        + mu[0] ** 2 * N
        + 2 * mu[0] * mu[1] * A
        + mu[1] ** 2 * A2
    )
    sigma2 = max(rss / max(N - 2, 1), _VAR_FLOOR)
    return mu, sigma2


def fit_movement_model(impressions: Sequence[ImpressionRecord]) -> MovementModel:
    """Fit dwell_raw ~ intercept + slope * action_count with participant-level
    random intercepts and slopes, by EM on the marginal Gaussian likelihood.

    If action counts never vary (e.g. nobody engaged), the slope is
    unidentifiable: it is pinned to 0 for the population and every
    participant, a warning is emitted, and only the random intercept is fit.
    """
    if not impressions:
        raise ValueError("fit_movement_model needs at least one impression")
    pids, n_i, sum_a, sum_a2, sum_y, sum_y2, sum_ay, y, a = _grouped_stats(impressions)
    if float(np.var(a)) == 0.0:
        warnings.warn(
            "action counts are constant across all impressions; movement slope "
            "is unidentifiable and has been set to 0"
        )
        return _fit_intercept_only(pids, n_i, sum_y, sum_y2)

    mu, sigma2 = _pooled_ols(n_i, sum_a, sum_a2, sum_y, sum_ay, sum_y2)
    tau2 = np.array([max(0.1 * sigma2, 1e-6), max(0.1 * sigma2, 1e-6)])
    N = float(n_i.sum())

    def e_step(mu, tau2, sigma2):
        """Posterior means/covariances of participant deviations + marginal LL."""
        g1, g2 = tau2
        r12 = math.sqrt(g1 * g2)
        # posterior covariance via A = I + G^(1/2) H G^(1/2), H = S_xx / sigma2;
        # stable as tau2 -> 0 (no explicit G inverse)
        a11 = 1.0 + g1 * n_i / sigma2
        a12 = r12 * sum_a / sigma2
        a22 = 1.0 + g2 * sum_a2 / sigma2
        det = a11 * a22 - a12 * a12
        s11 = g1 * a22 / det
        s12 = -r12 * a12 / det
        s22 = g2 * a11 / det
        # residual cross-moments against the population line
        q1 = sum_y - (mu[0] * n_i + mu[1] * sum_a)
        q2 = sum_ay - (mu[0] * sum_a + mu[1] * sum_a2)
        m1 = (s11 * q1 + s12 * q2) / sigma2
        m2 = (s12 * q1 + s22 * q2) / sigma2
        s_rr = (
            sum_y2
            - 2 * (mu[0] * sum_y + mu[1] * sum_ay)
            + mu[0] ** 2 * n_i
            + 2 * mu[0] * mu[1] * sum_a
            + mu[1] ** 2 * sum_a2
        )
        quad = (s_rr - (q1 * m1 + q2 * m2)) / sigma2
        ll = -0.5 * float(
            N * math.log(2 * math.pi)
            + np.sum(n_i * math.log(sigma2) + np.log(det) + quad)
        )
        return m1, m2, s11, s12, s22, ll

    ll_prev = -np.inf
    iterations = 0
    for iterations in range(1, EM_MAX_ITER + 1):
        m1, m2, s11, s12, s22, ll = e_step(mu, tau2, sigma2)
        if abs(ll - ll_prev) < EM_LL_RTOL * max(1.0, abs(ll_prev)):
            break
        ll_prev = ll

        # M-step: fixed effects, then variance components at the new mu
        rhs1 = float(np.sum(sum_y - (n_i * m1 + sum_a * m2)))
        rhs2 = float(np.sum(sum_ay - (sum_a * m1 + sum_a2 * m2)))
        sxx = np.array([[n_i.sum(), sum_a.sum()], [sum_a.sum(), sum_a2.sum()]])
        mu = np.linalg.solve(sxx, np.array([rhs1, rhs2]))
        tau2 = np.array(
            [
                max(float(np.mean(m1 * m1 + s11)), _VAR_FLOOR),
                max(float(np.mean(m2 * m2 + s22)), _VAR_FLOOR),
            ]
        )
        b1 = mu[0] + m1
        b2 = mu[1] + m2
        resid = (
            sum_y2
            - 2 * (b1 * sum_y + b2 * sum_ay)
            + b1 * b1 * n_i
            + 2 * b1 * b2 * sum_a
            + b2 * b2 * sum_a2
        )
        trace = s11 * n_i + 2 * s12 * sum_a + s22 * sum_a2
        sigma2 = max(float(np.sum(resid + trace)) / N, _VAR_FLOOR)

    # posterior means consistent with the final parameter values
    m1, m2, s11, s12, s22, ll = e_step(mu, tau2, sigma2)
    participants = {
        pid: (float(mu[0] + m1[i]), float(mu[1] + m2[i])) for i, pid in enumerate(pids)
    }
    return MovementModel(
        mu_alpha=float(mu[0]),
        mu_beta=float(mu[1]),
        tau_alpha=math.sqrt(float(tau2[0])),
        tau_beta=math.sqrt(float(tau2[1])),
        sigma_eps=math.sqrt(sigma2),
        participants=participants,
        log_likelihood=ll,
        iterations=iterations,
    )


def _fit_intercept_only(pids, n_i, sum_y, sum_y2) -> MovementModel:
    """Random-intercept EM for the slope-degenerate case."""
    N = float(n_i.sum())
    mu = float(sum_y.sum() / N)
    sigma2 = max(float(sum_y2.sum() / N - mu * mu), _VAR_FLOOR)
    tau2 = max(0.1 * sigma2, 1e-6)

    def e_step(mu, tau2, sigma2):
        det = 1.0 + tau2 * n_i / sigma2
        s11 = tau2 / det
        q1 = sum_y - mu * n_i
        m1 = (s11 * q1) / sigma2
        s_rr = sum_y2 - 2 * mu * sum_y + mu * mu * n_i
        quad = (s_rr - q1 * m1) / sigma2
        ll = -0.5 * float(
            N * math.log(2 * math.pi)
            + np.sum(n_i * math.log(sigma2) + np.log(det) + quad)
        )
        return m1, s11, ll

    ll_prev = -np.inf
    iterations = 0
    for iterations in range(1, EM_MAX_ITER + 1):
        m1, s11, ll = e_step(mu, tau2, sigma2)
        if abs(ll - ll_prev) < EM_LL_RTOL * max(1.0, abs(ll_prev)):
            break
        ll_prev = ll
        mu = float(np.sum(sum_y - n_i * m1) / N)
        tau2 = max(float(np.mean(m1 * m1 + s11)), _VAR_FLOOR)
        b = mu + m1
        resid = sum_y2 - 2 * b * sum_y + b * b * n_i
        sigma2 = max(float(np.sum(resid + s11 * n_i)) / N, _VAR_FLOOR)

    m1, s11, ll = e_step(mu, tau2, sigma2)
    participants = {pid: (float(mu + m1[i]), 0.0) for i, pid in enumerate(pids)}
    return MovementModel(
        mu_alpha=mu,
        mu_beta=0.0,
        tau_alpha=math.sqrt(tau2),
        tau_beta=0.0,
        sigma_eps=math.sqrt(sigma2),
        participants=participants,
        log_likelihood=ll,
        iterations=iterations,
    )


def no_pooling_slopes(impressions: Sequence[ImpressionRecord]) -> dict[str, float]:
    """Per-participant least-squares slopes, fit independently (no shrinkage).

    Participants whose action counts never vary have no defined slope and are
    omitted. Used as a comparison baseline for the hierarchical fit.
    """
    by_pid: dict[str, list[ImpressionRecord]] = {}
    for imp in impressions:
        by_pid.setdefault(imp.participant_id, []).append(imp)
    slopes: dict[str, float] = {}
    for pid in sorted(by_pid):
        rows = by_pid[pid]
        a = np.array([r.action_count for r in rows], dtype=float)
        y = np.array([r.dwell_raw for r in rows], dtype=float)
        sxx = float(((a - a.mean()) ** 2).sum())
        if sxx == 0:
            continue
        slopes[pid] = float(((a - a.mean()) * (y - y.mean())).sum() / sxx)
    return slopes


# ---------------------------------------------------------------------------
# Composition


@dataclass(frozen=True)
class PipelineResult:
    impressions: tuple[ImpressionRecord, ...]
    model: MovementModel
    audit: PipelineAudit


def run_pipeline(
    data: Dataset | Sequence[ImpressionRecord], rules: ExclusionRules | None = None
) -> PipelineResult:
    """Stage-1 exclusions -> movement fit -> adjustment -> floor."""
    rules = rules or ExclusionRules()
    impressions = list(data.impressions) if isinstance(data, Dataset) else list(data)
    if not impressions:
        empty_model = MovementModel(0.0, 0.0, 0.0, 0.0, 0.0, {})
        audit = PipelineAudit(
            0,
            {"over_max_dwell": 0, "edge_positions": 0, "below_min_adjusted": 0},
            0,
        )
        return PipelineResult((), empty_model, audit)
    stage1, audit1 = apply_exclusions_stage1(impressions, rules)
    if not stage1:
        model = MovementModel(0.0, 0.0, 0.0, 0.0, 0.0, {})
        audit = PipelineAudit(
            len(impressions),
            dict(audit1.removed, below_min_adjusted=0),
            0,
        )
        return PipelineResult((), model, audit)
    model = fit_movement_model(stage1)
    adjusted = adjust_dwell(stage1, model)
    cleaned, audit2 = apply_floor(adjusted, rules)
    audit = PipelineAudit(
        input_count=len(impressions),
        removed=dict(audit1.removed, **audit2.removed),
        retained_count=len(cleaned),
    )
    return PipelineResult(tuple(cleaned), model, audit)


# ---------------------------------------------------------------------------
# Persistence


def save_movement_model(path: str | Path, model: MovementModel) -> None:
    payload = {
        "mu_alpha": model.mu_alpha,
        "mu_beta": model.mu_beta,
        "tau_alpha": model.tau_alpha,
        "tau_beta": model.tau_beta,
        "sigma_eps": model.sigma_eps,
        "log_likelihood": model.log_likelihood,
        "iterations": model.iterations,
        "participants": {
            pid: {"intercept": ab[0], "slope": ab[1]}
            for pid, ab in sorted(model.participants.items())
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_movement_model(path: str | Path) -> MovementModel:
    d = json.loads(Path(path).read_text())
    return MovementModel(
        mu_alpha=d["mu_alpha"],
        mu_beta=d["mu_beta"],
        tau_alpha=d["tau_alpha"],
        tau_beta=d["tau_beta"],
        sigma_eps=d["sigma_eps"],
        participants={
            pid: (v["intercept"], v["slope"]) for pid, v in d["participants"].items()
        },
        log_likelihood=d.get("log_likelihood", float("nan")),
        iterations=d.get("iterations", 0),
    )


def save_audit(path: str | Path, audit: PipelineAudit) -> None:
    payload = {
        "input_count": audit.input_count,
        "removed": audit.removed,
        "retained_count": audit.retained_count,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
