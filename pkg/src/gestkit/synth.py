"""Confounded synthetic panels with a known additive treatment effect.

Data-generating process, per unit::

    L      ~ covariate_spec                      (independent draws)
    A      ~ Bernoulli(expit(treat_coefs . [1, L]))
    p0(L)  = min(expit(base_coefs . [1, L]), risk_cap)
    U      ~ Uniform(0, 1)
    Y(0)   = 1[U < p0(L)],   Y(1) = 1[U < p0(L) + psi_true]
    Y      = A * Y(1) + (1 - A) * Y(0)

so ``E[Y(1) - Y(0) | L] = psi_true`` exactly for every ``L`` (the additive
SNMM holds by construction, no rejection sampling).  Capping the untreated
risk at ``risk_cap`` keeps ``p0 + psi_true`` a valid probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._io import write_json
from .errors import ConfigError, InvalidRisk
from .panel import Panel, RowFilter

FAMILIES = ("betabinom", "negbin", "poisson", "normal", "bernoulli")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    family: str
    params: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown covariate family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "params", tuple(dict(self.params).items()))

    @property
    def kw(self):
        return dict(self.params)

    def draw(self, rng, n):
        kw = self.kw
        if self.family == "betabinom":
            # counts on 0..n; rho = 1 / (a + b + 1) is the intra-class correlation
            p, s = kw["mean"] / kw["n"], 1.0 / kw["rho"] - 1.0
            return rng.binomial(int(kw["n"]), rng.beta(p * s, (1.0 - p) * s, n)).astype(float)
        if self.family == "negbin":
            # gamma-Poisson with the given mean; variance = mean + mean^2 / size
            size = kw["size"]
            return rng.negative_binomial(size, size / (size + kw["mean"]), n).astype(float)
        if self.family == "poisson":
            return rng.poisson(kw["mean"], n).astype(float)
        if self.family == "normal":
            return rng.normal(kw.get("mean", 0.0), kw.get("sd", 1.0), n)
        return (rng.random(n) < kw["p"]).astype(float)


@dataclass(frozen=True)
class SynthConfig:
    n: int
    covariate_spec: tuple
    treat_coefs: tuple
    base_coefs: tuple
    psi_true: float
    risk_cap: float
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "covariate_spec", tuple(self.covariate_spec))
        object.__setattr__(self, "treat_coefs", tuple(float(c) for c in self.treat_coefs))
        object.__setattr__(self, "base_coefs", tuple(float(c) for c in self.base_coefs))
        k = len(self.covariate_spec) + 1
        if len(self.treat_coefs) != k or len(self.base_coefs) != k:
            raise ConfigError(f"treat_coefs and base_coefs need {k} entries (intercept + one per covariate)")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if not 0.0 <= self.psi_true < 1.0:
            raise ConfigError(f"psi_true={self.psi_true} outside [0, 1)")
        if not 0.0 < self.risk_cap < 1.0:
            raise ConfigError(f"risk_cap={self.risk_cap} outside (0, 1)")

    @property
    def schema(self):
        return tuple(c.name for c in self.covariate_spec)

    def to_dict(self):
        return {
            "n": self.n,
            "covariate_spec": [{"name": c.name, "family": c.family, "params": c.kw} for c in self.covariate_spec],
            "treat_coefs": list(self.treat_coefs),
            "base_coefs": list(self.base_coefs),
            "psi_true": self.psi_true,
            "risk_cap": self.risk_cap,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class GroundTruth:
    psi_true: float
    treated_fraction: float
    covariate_means: dict
    outcome_rates: dict
    naive_rd: float
    y0: np.ndarray | None = field(default=None, repr=False)
    y1: np.ndarray | None = field(default=None, repr=False)
    p0: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        d = {
            "psi_true": self.psi_true,
            "treated_fraction": self.treated_fraction,
            "covariate_means": self.covariate_means,
            "outcome_rates": self.outcome_rates,
            "naive_rd": self.naive_rd,
        }
        if self.y0 is not None:
            d["potential_outcome_rd"] = float(self.y1.mean() - self.y0.mean())
        return d


def _linear(coefs, L):
    return coefs[0] + (L @ np.asarray(coefs[1:]) if L.shape[1] else 0.0)


def generate(config: SynthConfig, *, retain_potential=False, id_prefix="u") -> tuple[Panel, GroundTruth]:
    """Draw a panel from ``config``; the same config always gives the same panel."""
    if config.risk_cap + config.psi_true > 1.0:
        raise InvalidRisk(
            f"risk_cap {config.risk_cap} + psi_true {config.psi_true} > 1: treated risk would exceed 1"
        )
    n = config.n
    rng = np.random.default_rng(config.seed)
    L = np.column_stack([c.draw(rng, n) for c in config.covariate_spec]) if config.covariate_spec else np.zeros((n, 0))
    a = (rng.random(n) < expit(_linear(config.treat_coefs, L))).astype(np.int8)
    p0 = np.minimum(expit(_linear(config.base_coefs, L)) * np.ones(n), config.risk_cap)
    u = rng.random(n)
    y0 = (u < p0).astype(np.int8)
    y1 = (u < p0 + config.psi_true).astype(np.int8)
    y = np.where(a == 1, y1, y0)

    width = max(6, len(str(n - 1)))
    ids = [f"{id_prefix}{i:0{width}d}" for i in range(n)]
    panel = Panel(
        schema=config.schema,
        unit_ids=ids,
        treatment=a,
        outcome=y,
        covariates=L,
        provenance=f"synth:n={n},psi_true={config.psi_true},seed={config.seed}",
    )
    treated = a == 1
    means = {
        arm: {c: float(L[mask, j].mean()) if mask.any() else math.nan for j, c in enumerate(config.schema)}
        for arm, mask in (("treated", treated), ("control", ~treated))
    }
    rates = {
        "treated": float(y[treated].mean()) if treated.any() else math.nan,
        "control": float(y[~treated].mean()) if (~treated).any() else math.nan,
    }
    truth = GroundTruth(
        psi_true=config.psi_true,
        treated_fraction=float(treated.mean()),
        covariate_means=means,
        outcome_rates=rates,
        naive_rd=rates["treated"] - rates["control"],
        y0=y0 if retain_potential else None,
        y1=y1 if retain_potential else None,
        p0=p0 if retain_potential else None,
    )
    return panel, truth


def write_ground_truth(path, truth: GroundTruth, config: SynthConfig | None = None):
    d = truth.to_dict()
    if config is not None:
        d["config"] = config.to_dict()
    write_json(path, d)


# --------------------------------------------------------------------------- facet preset

FACET_N = 16_868
FACET_SEED = 42
FACET_PSI = 0.25
FACET_RISK_CAP = 0.5

# Produced by scripts/calibrate_facet_preset.py (exact moment matching over the
# joint covariate support).  Achieved population moments:
#   treated fraction 0.6600, propensity range [0.1437, 0.9912]
#   cum_subjects_enrolled  mean T 4.6700  C 2.4100  pooled SD 2.0287  SMD 1.1140
#   current_term_load      mean T 1.6900  C 1.0900  pooled SD 1.3699  SMD 0.4380
#   dropout T 0.5040  C 0.1500  overall 0.3836  naive RD 0.3540  (psi_true 0.25)
#   after 99th-percentile weight truncation: SMD 0.025 / 0.059, MSM RD 0.2561
# Arm variances are not published, so the split of variance between the two
# covariates is set by the pooled SDs implied by the two SMDs.  Bounded
# supports keep the control-arm weight tail short enough that truncation at
# the 99th percentile does not undo the balance.
FACET_COVARIATES = (
    CovariateSpec(
        "cum_subjects_enrolled", "betabinom", (("n", 6), ("mean", 3.9016000000000073), ("rho", 0.5337045707864434))
    ),
    CovariateSpec(
        "current_term_load", "betabinom", (("n", 8), ("mean", 1.4860000000000053), ("rho", 0.10458294502105653))
    ),
)
FACET_TREAT_COEFS = (-1.7851494133491916, 0.5168546357318844, 0.4254900916922604)
FACET_BASE_COEFS = (-2.7279141515093275, 0.24870258625805255, 0.24870258625805255)


def facet_preset(**overrides) -> SynthConfig:
    """Configuration calibrated to the engineering-dropout cohort moments.

    Defaults: n=16,868, psi_true=0.25, seed=42.  Keyword overrides are applied
    with :func:`dataclasses.replace` (e.g. ``facet_preset(n=20_000)``).
    """
    cfg = SynthConfig(
        n=FACET_N,
        covariate_spec=FACET_COVARIATES,
        treat_coefs=FACET_TREAT_COEFS,
        base_coefs=FACET_BASE_COEFS,
        psi_true=FACET_PSI,
        risk_cap=FACET_RISK_CAP,
        seed=FACET_SEED,
    )
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------- raw cohort with exclusions

COHORT_TOTAL = 24_133
COHORT_MISSING_LABEL = 1_596
COHORT_NO_TERM2 = 5_669
LABEL_FLAG = "label_observed"
TERM2_FLAG = "reached_term2"


@dataclass(frozen=True)
class CohortBookkeeping:
    total: int
    missing_label: int
    no_term2: int
    modelling: int

    def expected_flow(self):
        """Stage counts the facet filters must reproduce."""
        after_labels = self.total - self.missing_label
        return [
            ("Full Engineering Cohort", self.total),
            ("Valid 3-Year Labels", after_labels),
            ("Analysis Sample (T = 2)", after_labels - self.no_term2),
            ("Modelling Dataset", self.modelling),
        ]


def facet_cohort(config: SynthConfig | None = None, *, missing_label=COHORT_MISSING_LABEL, no_term2=COHORT_NO_TERM2):
    """Raw cohort wrapping a facet panel with rows the sample flow must exclude.

    Returns ``(raw_panel, modelling_panel, truth, bookkeeping)``.  The raw panel
    carries two extra 0/1 covariates, ``label_observed`` and ``reached_term2``;
    rows of the modelling panel have both set and appear in the raw panel in
    their original relative order, so filtering on the flags and dropping them
    recovers ``modelling_panel`` exactly.
    """
    config = config or facet_preset()
    core, truth = generate(config)
    n_excl = missing_label + no_term2
    excl_cfg = replace(config, n=max(n_excl, 1), seed=config.seed + 1)
    extra, _ = generate(excl_cfg, id_prefix="x")
    extra = extra.take(np.arange(n_excl), check_unique=True)

    label = np.concatenate([np.ones(core.n), np.r_[np.zeros(missing_label), np.ones(no_term2)]])
    term2 = np.concatenate([np.ones(core.n), np.r_[np.ones(missing_label), np.zeros(no_term2)]])
    total = core.n + n_excl
    # random interleave that keeps each block's internal order
    rng = np.random.default_rng([config.seed, 2])
    slot_is_core = np.zeros(total, dtype=bool)
    slot_is_core[rng.choice(total, core.n, replace=False)] = True
    order = np.empty(total, dtype=int)
    order[slot_is_core] = np.arange(core.n)
    order[~slot_is_core] = core.n + np.arange(n_excl)

    stacked_cov = np.vstack([core.covariates, extra.covariates])
    raw = Panel(
        schema=core.schema + (LABEL_FLAG, TERM2_FLAG),
        unit_ids=np.concatenate([core.unit_ids, extra.unit_ids])[order],
        treatment=np.concatenate([core.treatment, extra.treatment])[order],
        outcome=np.concatenate([core.outcome, extra.outcome])[order],
        covariates=np.column_stack([stacked_cov, label, term2])[order],
        provenance=f"synth-cohort:n={total},seed={config.seed}",
    )
    book = CohortBookkeeping(total, missing_label, no_term2, core.n)
    return raw, core, truth, book


def facet_filters(schema):
    """The three exclusion stages of the cohort flow, as row filters."""
    li, ti = schema.index(LABEL_FLAG), schema.index(TERM2_FLAG)
    return [
        RowFilter("Valid 3-Year Labels", lambda r: r.covariates[li] == 1.0, "Insufficient follow-up"),
        RowFilter("Analysis Sample (T = 2)", lambda r: r.covariates[ti] == 1.0, "No survival to Term 2"),
        RowFilter("Modelling Dataset", lambda r: all(math.isfinite(v) for v in r.covariates), "None"),
    ]
