"""Propensity scores, stabilized IPT weights and the weighted MSM.

The marginal structural model is ``logit P(Y^a = 1) = alpha0 + alpha1 * a``,
fitted by weighted logistic regression with stabilized weights
``SW_i = P(A = A_i) / P(A = A_i | L_i)``.  The numerator is the empirical
treated fraction; the denominator comes from a main-effects logistic
propensity model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._io import write_rows_csv
from .errors import ContractViolation, DimensionMismatch, PositivityViolation, Separation
from .glm import DesignMatrix, LogisticFit, fit_logistic, predict_prob
from .panel import Panel

MEAN_TOLERANCE = 0.05


@dataclass(frozen=True, eq=False)
class PropensityScores:
    scores: np.ndarray
    model: LogisticFit | None = None

    def __post_init__(self):
        s = np.array(self.scores, dtype=float)
        if s.ndim != 1 or not np.isfinite(s).all():
            raise ContractViolation("propensity scores must be a finite vector")
        if s.size and ((s <= 0.0).any() or (s >= 1.0).any()):
            raise ContractViolation("propensity scores must lie strictly inside (0, 1)")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def range(self):
        return float(self.scores.min()), float(self.scores.max())


@dataclass(frozen=True)
class WeightStats:
    mean: float
    max: float
    min: float
    p99: float
    ess: float

    @classmethod
    def of(cls, w):
        return cls(
            mean=float(w.mean()),
            max=float(w.max()),
            min=float(w.min()),
            p99=float(np.quantile(w, 0.99)),
            ess=effective_sample_size(w),
        )

    def to_dict(self):
        return {"mean": self.mean, "max": self.max, "min": self.min, "p99": self.p99, "ess": self.ess}


@dataclass(frozen=True, eq=False)
class WeightSet:
    weights: np.ndarray
    stats: WeightStats
    percentile: float | None = None
    cap: float | None = None
    floor: float | None = None

    @property
    def mean_ok(self):
        """Stabilized weights should average about one; a miss is a flag, not an error."""
        return abs(self.stats.mean - 1.0) <= MEAN_TOLERANCE

    @property
    def truncation(self):
        return (self.percentile, self.cap)

    def to_dict(self):
        return {
            "truncation_percentile": self.percentile,
            "cap": self.cap,
            "floor": self.floor,
            "stats": self.stats.to_dict(),
            "mean_within_tolerance": self.mean_ok,
        }


@dataclass(frozen=True, eq=False)
class MsmResult:
    alpha0: float
    alpha1: float
    alpha1_se: float
    alpha1_se_model: float
    risk_p0: float
    risk_p1: float
    risk_difference: float
    odds_ratio: float
    fit: LogisticFit | None = field(default=None, repr=False)

    def to_dict(self):
        return {
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "alpha1_se_sandwich": self.alpha1_se,
            "alpha1_se_model": self.alpha1_se_model,
            "risk_p0": self.risk_p0,
            "risk_p1": self.risk_p1,
            "risk_difference": self.risk_difference,
            "risk_difference_pp": 100.0 * self.risk_difference,
            "odds_ratio": self.odds_ratio,
        }


def effective_sample_size(w):
    w = np.asarray(w, dtype=float)
    return float(w.sum() ** 2 / (w**2).sum())


def propensity_design(panel: Panel) -> DesignMatrix:
    return DesignMatrix(
        ("(intercept)", *panel.schema),
        np.column_stack([np.ones(panel.n), panel.covariates]),
        intercept=True,
    )


def fit_propensity(panel: Panel) -> PropensityScores:
    """Main-effects logistic model for ``P(A = 1 | L)``."""
    panel.require_both_arms()
    X = propensity_design(panel)
    try:
        fit = fit_logistic(X, panel.treatment)
    except Separation as exc:
        raise PositivityViolation(
            f"propensity model separates the arms ({exc}); some covariate stratum is "
            "deterministically treated or untreated - restrict the sample or coarsen covariates"
        ) from exc
    return PropensityScores(predict_prob(fit, X), fit)


def stabilized_weights(scores: PropensityScores, panel: Panel) -> WeightSet:
    e = scores.scores
    if len(e) != panel.n:
        raise DimensionMismatch(f"{len(e)} scores for {panel.n} rows")
    a = panel.treatment
    p_bar = a.mean()
    w = np.where(a == 1, p_bar / e, (1.0 - p_bar) / (1.0 - e))
    return WeightSet(w, WeightStats.of(w))


def truncate_weights(ws: WeightSet, percentile, *, two_sided=False) -> WeightSet:
    """Cap weights at their ``percentile``-th quantile.

    Quantiles use linear interpolation between order statistics (numpy's
    default rule).  ``two_sided`` also floors at the ``100 - percentile``
    quantile.
    """
    if not 50.0 < percentile <= 100.0:
        raise ValueError(f"percentile must lie in (50, 100], got {percentile}")
    w = ws.weights
    cap = float(np.quantile(w, percentile / 100.0))
    floor = float(np.quantile(w, 1.0 - percentile / 100.0)) if two_sided else None
    out = np.minimum(w, cap)
    if floor is not None:
        out = np.maximum(out, floor)
    return WeightSet(out, WeightStats.of(out), percentile=float(percentile), cap=cap, floor=floor)


def msm_from_coefficients(alpha0, alpha1, se=math.nan, se_model=math.nan, fit=None) -> MsmResult:
    p0 = float(expit(alpha0))
    p1 = float(expit(alpha0 + alpha1))
    return MsmResult(
        alpha0=float(alpha0),
        alpha1=float(alpha1),
        alpha1_se=float(se),
        alpha1_se_model=float(se_model),
        risk_p0=p0,
        risk_p1=p1,
        risk_difference=p1 - p0,
        odds_ratio=math.exp(alpha1),
        fit=fit,
    )


def fit_msm(panel: Panel, ws: WeightSet) -> MsmResult:
    """Weighted logistic fit of ``Y ~ 1 + A``; the RD is the model contrast."""
    panel.require_both_arms()
    if len(ws.weights) != panel.n:
        raise DimensionMismatch(f"{len(ws.weights)} weights for {panel.n} rows")
    X = DesignMatrix(("(intercept)", "A"), np.column_stack([np.ones(panel.n), panel.treatment]))
    fit = fit_logistic(X, panel.outcome, ws.weights)
    a0, a1 = fit.coefficients
    return msm_from_coefficients(a0, a1, fit.se_sandwich[1], fit.se_model[1], fit)


@dataclass(frozen=True)
class IptwEstimator:
    """Picklable ``panel -> risk difference`` callable (propensity, weights, MSM)."""

    truncate_pct: float | None = 99.0

    def __call__(self, panel: Panel) -> float:
        ws = stabilized_weights(fit_propensity(panel), panel)
        if self.truncate_pct is not None and self.truncate_pct < 100:
            ws = truncate_weights(ws, self.truncate_pct)
        return fit_msm(panel, ws).risk_difference


def weight_histogram(ws: WeightSet, bins=50):
    """Equal-width bins over the weight range: list of ``(bin_lo, bin_hi, count)``."""
    counts, edges = np.histogram(ws.weights, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def write_histogram_csv(hist, path):
    write_rows_csv(path, ["bin_lo", "bin_hi", "count"], hist)
