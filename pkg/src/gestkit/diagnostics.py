"""Identification and balance diagnostics.

Covers positivity of the propensity scores, standardized mean differences
before and after weighting, a missing-data check and E-values for
unmeasured confounding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveRR
from .iptw import PropensityScores, WeightSet
from .panel import GroupSummary, Panel

SMD_TARGET = 0.10
ADVISORY_LOW = 0.01
ADVISORY_HIGH = 0.99


class ZeroVarianceWarning(UserWarning):
    pass


def _weighted_mean_var(x, w):
    if w.size and np.all(w == w[0]):
        # constant weights cancel; take the unweighted path so the result is bit-identical
        return float(x.mean()), float(x.var(ddof=1)) if x.size > 1 else 0.0
    m = np.average(x, weights=w)
    # reliability-weighted unbiased variance; equals ddof=1 for unit weights
    v1, v2 = w.sum(), (w**2).sum()
    denom = v1 - v2 / v1
    var = float((w * (x - m) ** 2).sum() / denom) if denom > 0 else 0.0
    return float(m), var


def smd(panel: Panel, covariate, weights: WeightSet | np.ndarray | None = None, *, weighted_variance=False):
    """Absolute standardized mean difference ``|m1 - m0| / sqrt((s1^2 + s0^2) / 2)``.

    With ``weights`` the arm means are weighted.  The pooled SD uses the
    unweighted arm variances unless ``weighted_variance`` is set.  Arm
    variances use ``ddof=1``.  A zero pooled SD with differing means warns
    with :class:`ZeroVarianceWarning` and returns ``inf``.
    """
    x = panel.covariate(covariate)
    t = panel.treatment == 1
    if weights is None:
        w = np.ones(panel.n)
    else:
        w = np.asarray(weights.weights if isinstance(weights, WeightSet) else weights, dtype=float)
    m1, wv1 = _weighted_mean_var(x[t], w[t])
    m0, wv0 = _weighted_mean_var(x[~t], w[~t])
    if weighted_variance:
        v1, v0 = wv1, wv0
    else:
        v1 = float(x[t].var(ddof=1)) if t.sum() > 1 else 0.0
        v0 = float(x[~t].var(ddof=1)) if (~t).sum() > 1 else 0.0
    pooled = math.sqrt((v1 + v0) / 2.0)
    diff = abs(m1 - m0)
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        warnings.warn(f"zero pooled variance for {covariate!r} with differing means", ZeroVarianceWarning, stacklevel=2)
        return math.inf
    return diff / pooled


@dataclass(frozen=True)
class PositivityCheck:
    score_min: float
    score_max: float
    passed: bool
    n_below: int
    n_above: int
    low: float = ADVISORY_LOW
    high: float = ADVISORY_HIGH

    @property
    def advisory_count(self):
        return self.n_below + self.n_above

    def to_dict(self):
        return {
            "score_min": self.score_min,
            "score_max": self.score_max,
            "passed": self.passed,
            "n_below_low": self.n_below,
            "n_above_high": self.n_above,
            "advisory_thresholds": [self.low, self.high],
        }


def positivity_report(scores) -> PositivityCheck:
    """Range of the propensity scores plus counts in the practical-violation tails.

    ``scores`` may be a :class:`PropensityScores` or a raw vector; a raw vector
    with values on or outside [0, 1] boundaries is rejected.
    """
    if not isinstance(scores, PropensityScores):
        scores = PropensityScores(np.asarray(scores, dtype=float))
    s = scores.scores
    lo, hi = float(s.min()), float(s.max())
    return PositivityCheck(
        score_min=lo,
        score_max=hi,
        passed=0.0 < lo and hi < 1.0,
        n_below=int((s < ADVISORY_LOW).sum()),
        n_above=int((s > ADVISORY_HIGH).sum()),
    )


@dataclass(frozen=True)
class EvalueResult:
    rr_input: float
    evalue_point: float
    basis: str = "risk ratio"
    inverted: bool = False

    def to_dict(self):
        return {"rr": self.rr_input, "evalue": self.evalue_point, "basis": self.basis, "inverted": self.inverted}


def evalue(rr, basis="risk ratio") -> EvalueResult:
    """E-value for a point risk ratio: ``RR + sqrt(RR * (RR - 1))``.

    Protective ratios (``rr < 1``) are inverted first.
    """
    if not (rr > 0 and math.isfinite(rr)):
        raise NonPositiveRR(f"risk ratio must be positive and finite, got {rr}")
    inverted = rr < 1.0
    r = 1.0 / rr if inverted else float(rr)
    return EvalueResult(r, r + math.sqrt(r * (r - 1.0)), basis, inverted)


def evalue_bases(groups: GroupSummary, causal_rd) -> list[EvalueResult]:
    """E-values for the raw arm risk ratio and for the ratio implied by a causal RD.

    The second basis treats the control-arm rate as the untreated risk:
    ``RR = (p0 + RD) / p0``.
    """
    p1, p0 = groups.treated.outcome_rate, groups.control.outcome_rate
    out = []
    if p0 > 0 and p1 > 0:
        out.append(evalue(p1 / p0, basis="raw arm risk ratio (treated rate / control rate)"))
    if p0 > 0 and p0 + causal_rd > 0:
        out.append(evalue((p0 + causal_rd) / p0, basis="causal RD over control risk ((p0 + RD) / p0)"))
    return out


def missing_count(panel: Panel) -> int:
    """Non-finite covariate cells still in the panel (zero after ingestion)."""
    return int((~np.isfinite(panel.covariates)).sum())


@dataclass(frozen=True)
class CovariateBalance:
    name: str
    smd_raw: float
    smd_weighted: float | None = None

    def to_dict(self):
        return {"name": self.name, "smd_raw": self.smd_raw, "smd_weighted": self.smd_weighted}


@dataclass(frozen=True)
class BalanceReport:
    covariates: tuple
    positivity: PositivityCheck
    missing_count: int
    dropped_missing: int = 0
    weight_stats: dict = field(default_factory=dict)

    @property
    def balanced(self):
        return all(c.smd_weighted is not None and c.smd_weighted < SMD_TARGET for c in self.covariates)

    def table(self):
        """Rows of (check, value, threshold, assessment) in diagnostic-table order."""
        pos = self.positivity
        rows = [
            {
                "check": "Positivity: PS range",
                "value": [pos.score_min, pos.score_max],
                "threshold": "(0, 1)",
                "assessment": "PASSED" if pos.passed else "FAILED",
            }
        ]
        for c in self.covariates:
            rows.append(
                {
                    "check": f"SMD: {c.name}",
                    "value": c.smd_raw,
                    "threshold": f"< {SMD_TARGET:.2f} (post-weight target)",
                    "assessment": "Justifies IPTW" if c.smd_raw >= SMD_TARGET else "Balanced before weighting",
                }
            )
            if c.smd_weighted is not None:
                rows.append(
                    {
                        "check": f"SMD (weighted): {c.name}",
                        "value": c.smd_weighted,
                        "threshold": f"< {SMD_TARGET:.2f}",
                        "assessment": "PASSED" if c.smd_weighted < SMD_TARGET else "FAILED",
                    }
                )
        ws = self.weight_stats
        if "raw_max" in ws:
            rows.append({"check": "IPTW weights: raw maximum", "value": ws["raw_max"], "threshold": None,
                         "assessment": "Truncation applied" if ws.get("truncated_max") is not None else "No truncation"})
        if ws.get("truncated_max") is not None:
            rows.append({"check": "IPTW weights: truncated maximum", "value": ws["truncated_max"], "threshold": None,
                         "assessment": f"Capped at the {ws.get('percentile')}th percentile"})
        rows.append(
            {
                "check": "Missing data (key covariates)",
                "value": self.missing_count,
                "threshold": 0,
                "assessment": "PASSED" if self.missing_count == 0 else "FAILED",
            }
        )
        return rows

    def to_dict(self):
        return {
            "covariates": [c.to_dict() for c in self.covariates],
            "positivity": self.positivity.to_dict(),
            "missing_count": self.missing_count,
            "dropped_missing": self.dropped_missing,
            "weight_stats": dict(self.weight_stats),
            "balanced_after_weighting": self.balanced,
            "table": self.table(),
        }


def balance_report(panel: Panel, scores: PropensityScores, weights: WeightSet | None = None,
                   raw_weights: WeightSet | None = None, *, weighted_variance=False) -> BalanceReport:
    covs = tuple(
        CovariateBalance(
            name,
            smd(panel, name),
            smd(panel, name, weights, weighted_variance=weighted_variance) if weights is not None else None,
        )
        for name in panel.schema
    )
    ws = {}
    if raw_weights is not None:
        ws["raw_max"] = raw_weights.stats.max
        ws["raw"] = raw_weights.stats.to_dict()
    if weights is not None:
        ws["truncated_max"] = weights.stats.max if weights.percentile is not None else None
        ws["percentile"] = weights.percentile
        ws["final"] = weights.stats.to_dict()
    return BalanceReport(covs, positivity_report(scores), missing_count(panel), panel.dropped_missing, ws)
