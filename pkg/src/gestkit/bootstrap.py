"""BCa bootstrap intervals for scalar panel estimators.

Resampling is stratified by treatment arm (each resample keeps the exact
arm sizes).  Resample ``i`` draws from ``default_rng([seed, i])``, so the
result does not depend on execution order or on how many worker processes
share the work.  The acceleration constant comes from a grouped
(delete-a-block) jackknife whose groups are balanced across arms.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._io import write_rows_csv
from .errors import ConfigError, DegenerateDistribution, EstimatorFailure, GestkitError
from .panel import Panel

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.01
_JACK_STREAM = 0x6A61636B


@dataclass(frozen=True, eq=False)
class BcaResult:
    estimate: float
    n_resamples: int
    resample_estimates: np.ndarray = field(repr=False)
    z0: float
    accel: float
    ci: tuple
    level: float
    boot_se: float
    seed: int
    failures: int = 0
    jack_groups: int = 0
    degenerate: bool = False
    warnings: tuple = ()

    def to_dict(self):
        b = self.resample_estimates
        return {
            "estimate": self.estimate,
            "n_resamples": self.n_resamples,
            "n_successful": int(b.size),
            "failures": self.failures,
            "z0": self.z0,
            "accel": self.accel,
            "ci": list(self.ci),
            "level": self.level,
            "boot_se": self.boot_se,
            "boot_mean": float(b.mean()) if b.size else math.nan,
            "seed": self.seed,
            "jack_groups": self.jack_groups,
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
        }


# --------------------------------------------------------------------------- resampling


def stratified_indices(treatment, seed, i):
    """Row indices of resample ``i``: within-arm draws with replacement."""
    rng = np.random.default_rng([seed, i])
    treated = np.flatnonzero(treatment == 1)
    control = np.flatnonzero(treatment == 0)
    return np.concatenate(
        [treated[rng.integers(0, treated.size, treated.size)], control[rng.integers(0, control.size, control.size)]]
    )


def jackknife_groups(treatment, n_groups, seed):
    """Group label per row; arms are shuffled separately and dealt round-robin."""
    n = len(treatment)
    if n_groups > n:
        raise ConfigError(f"jack_groups={n_groups} exceeds n={n}")
    rng = np.random.default_rng([seed, _JACK_STREAM])
    labels = np.empty(n, dtype=np.int64)
    treated = rng.permutation(np.flatnonzero(treatment == 1))
    control = rng.permutation(np.flatnonzero(treatment == 0))
    labels[treated] = np.arange(treated.size) % n_groups
    labels[control] = (treated.size + np.arange(control.size)) % n_groups
    return labels


def acceleration(jack):
    """``sum d^3 / (6 (sum d^2)^1.5)`` with ``d = mean(jack) - jack``."""
    jack = np.asarray(jack, dtype=float)
    d = jack.mean() - jack
    ss = float((d**2).sum())
    if ss == 0.0:
        return 0.0
    return float((d**3).sum() / (6.0 * ss**1.5))


def bias_correction(boot, estimate):
    """``Phi^-1`` of the share of resamples below the estimate, clamped away from 0 and 1."""
    B = len(boot)
    prop = float((np.asarray(boot) < estimate).mean())
    prop = min(max(prop, 1.0 / (B + 1)), B / (B + 1.0))
    return float(norm.ppf(prop))


def bca_interval(boot, estimate, accel, level=0.95, z0=None):
    """BCa endpoints from a resample distribution; returns ``(lo, hi, z0)``.

    With ``z0 == 0`` and ``accel == 0`` this is the plain percentile interval.
    Quantiles use linear interpolation between order statistics.
    """
    boot = np.asarray(boot, dtype=float)
    if z0 is None:
        z0 = bias_correction(boot, estimate)
    z = norm.ppf([(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    zz = z0 + z
    alphas = norm.cdf(z0 + zz / (1.0 - accel * zz))
    lo, hi = np.quantile(boot, alphas)
    return float(lo), float(hi), z0


# --------------------------------------------------------------------------- workers

_WORKER = {}


def _init_worker(panel, estimator):
    _WORKER["panel"] = panel
    _WORKER["estimator"] = estimator


def _safe(estimator, panel):
    try:
        return float(estimator(panel))
    except GestkitError as exc:
        log.debug("replicate failed: %s", exc)
        return math.nan


def _boot_one(panel, estimator, seed, i):
    return _safe(estimator, panel.take(stratified_indices(panel.treatment, seed, i)))


def _jack_one(panel, estimator, labels, g):
    return _safe(estimator, panel.take(np.flatnonzero(labels != g)))


def _boot_chunk(args):
    seed, idx = args
    return [_boot_one(_WORKER["panel"], _WORKER["estimator"], seed, i) for i in idx]


def _jack_chunk(args):
    labels, groups = args
    return [_jack_one(_WORKER["panel"], _WORKER["estimator"], labels, g) for g in groups]


def _run(panel, estimator, workers, serial_fn, chunk_fn, items, payload):
    if not workers or workers <= 1:
        return np.array([serial_fn(i) for i in items], dtype=float)
    chunks = np.array_split(np.asarray(items), max(1, workers * 4))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(panel, estimator)) as pool:
        parts = pool.map(chunk_fn, [(payload, c.tolist()) for c in chunks if c.size])
        return np.array([v for part in parts for v in part], dtype=float)


# --------------------------------------------------------------------------- public


def bca(panel: Panel, estimator, B=1000, level=0.95, seed=42, jack_groups=1000, *, workers=1, estimate=None) -> BcaResult:
    """Stratified BCa bootstrap of ``estimator`` on ``panel``.

    Parameters
    ----------
    estimator : callable ``Panel -> float``; must be picklable when
        ``workers > 1``.  Replicates raising a package error are counted as
        failures; 1% or more failures aborts with :class:`EstimatorFailure`.
    B : number of resamples (>= 100)
    jack_groups : number of delete-a-group jackknife groups (>= 20)
    workers : process count; results are identical for any value
    estimate : full-panel estimate if already known
    """
    if B < 100:
        raise ConfigError(f"B={B} < 100")
    if jack_groups < 20:
        raise ConfigError(f"jack_groups={jack_groups} < 20")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level={level} outside (0, 1)")
    panel.require_both_arms()
    theta = float(estimator(panel)) if estimate is None else float(estimate)

    boot_all = _run(panel, estimator, workers, lambda i: _boot_one(panel, estimator, seed, i), _boot_chunk, range(B), seed)
    failed = ~np.isfinite(boot_all)
    failures = int(failed.sum())
    if failures / B >= MAX_FAILURE_RATE:
        raise EstimatorFailure(f"{failures} of {B} bootstrap resamples failed (limit {MAX_FAILURE_RATE:.0%})")
    boot = boot_all[~failed]

    if np.all(boot == boot[0]):
        return BcaResult(theta, B, boot, 0.0, 0.0, (float(boot[0]), float(boot[0])), level, 0.0, seed,
                         failures, jack_groups, True, ("degenerate: all resample estimates identical",))

    labels = jackknife_groups(panel.treatment, jack_groups, seed)
    jack = _run(panel, estimator, workers, lambda g: _jack_one(panel, estimator, labels, g), _jack_chunk,
                range(jack_groups), labels)
    if not np.isfinite(jack).all():
        raise EstimatorFailure(f"{int((~np.isfinite(jack)).sum())} jackknife replicates failed")
    a = acceleration(jack)
    lo, hi, z0 = bca_interval(boot, theta, a, level)
    notes = []
    if not lo <= theta <= hi:
        notes.append("estimate_outside_ci")
    return BcaResult(
        estimate=theta,
        n_resamples=B,
        resample_estimates=boot,
        z0=z0,
        accel=a,
        ci=(lo, hi),
        level=level,
        boot_se=float(boot.std(ddof=1)),
        seed=seed,
        failures=failures,
        jack_groups=jack_groups,
        degenerate=False,
        warnings=tuple(notes),
    )


def bootstrap_histogram(result: BcaResult, bins=40):
    """Equal-width bins over the resample range: list of ``(bin_lo, bin_hi, count)``."""
    if result.degenerate:
        raise DegenerateDistribution("all resample estimates are identical")
    counts, edges = np.histogram(result.resample_estimates, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def write_histogram_csv(hist, path):
    write_rows_csv(path, ["bin_lo", "bin_hi", "count"], hist)
