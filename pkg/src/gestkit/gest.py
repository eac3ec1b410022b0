"""G-estimation of the additive structural nested mean model.

Under the model, ``Y*(psi) = Y - psi * A`` has the same conditional mean as
the untreated potential outcome, so at the true ``psi`` it carries no
information about treatment once ``L`` is accounted for.  For every
candidate ``psi`` on a grid we fit the treatment model
``logit P(A=1) ~ 1 + L + Y*(psi)`` and record the Wald coefficient on
``Y*(psi)``; the estimate is where that coefficient crosses zero, refined
by bisection between the bracketing grid points.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ._io import write_rows_csv
from .errors import ConfigError, EstimationError, GestFitError, NoCrossing
from .glm import inverse_information, irls
from .panel import Panel

DEFAULT_GRID = (0.0, 0.5, 0.005)
INDEP_TOL = 1e-6
BRACKET_TOL = 1e-5
RESID_TERM = "Y*(psi)"


class MultipleCrossingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GestCurvePoint:
    psi: float
    indep_coef: float
    se: float


@dataclass(frozen=True)
class GestResult:
    psi_hat: float
    curve: tuple
    crossing_bracket: tuple
    refined: bool
    treatment_model_terms: tuple
    indep_coef_at_hat: float = 0.0
    n_crossings: int = 1
    warnings: tuple = ()
    grid: tuple = DEFAULT_GRID

    @property
    def multiple_crossings(self):
        return self.n_crossings > 1

    def to_dict(self):
        lo, hi, step = self.grid
        return {
            "psi_hat": self.psi_hat,
            "risk_difference_pp": 100.0 * self.psi_hat,
            "crossing_bracket": list(self.crossing_bracket),
            "refined": self.refined,
            "indep_coef_at_hat": self.indep_coef_at_hat,
            "n_crossings": self.n_crossings,
            "warnings": list(self.warnings),
            "grid": {"lo": lo, "hi": hi, "step": step, "n_points": len(self.curve)},
            "treatment_model_terms": list(self.treatment_model_terms),
        }


def grid_points(lo, hi, step):
    """Candidate values ``lo, lo+step, ..., <= hi``; (0, .5, .005) gives 101 points."""
    lo, hi, step = float(lo), float(hi), float(step)
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ConfigError(f"grid needs lo < hi, got ({lo}, {hi})")
    if not step > 0:
        raise ConfigError(f"grid step must be positive, got {step}")
    k = int(math.floor((hi - lo) / step + 1e-9))
    return np.round(lo + step * np.arange(k + 1), 12)


def residual_outcome(psi, panel: Panel) -> np.ndarray:
    return panel.outcome - psi * panel.treatment


class TreatmentModel:
    """Refits ``A ~ 1 + L + Y*(psi)`` for arbitrary ``psi`` on one panel.

    Every fit starts from the same point (the ``A ~ 1 + L`` coefficients with
    a zero appended) so results do not depend on evaluation order.
    """

    def __init__(self, panel: Panel):
        panel.require_both_arms()
        self.panel = panel
        n = panel.n
        self._base = np.column_stack([np.ones(n), panel.covariates])
        self._a = panel.treatment.astype(float)
        self._y = panel.outcome.astype(float)
        self._w = np.ones(n)
        self.terms = ("(intercept)", *panel.schema, RESID_TERM)
        try:
            beta, *_ = irls(self._base, self._a, self._w)
            self._start = np.append(beta, 0.0)
        except EstimationError:
            self._start = None

    def fit(self, psi, with_se=True, start=None):
        """Return ``(coef, se, beta)`` for the ``Y*(psi)`` term.

        ``se`` is NaN unless requested; ``start`` overrides the shared
        starting point (used for warm starts inside a serial refinement).
        """
        X = np.column_stack([self._base, self._y - psi * self._a])
        try:
            beta, info, *_ = irls(X, self._a, self._w, start=self._start if start is None else start)
            se = math.sqrt(inverse_information(info)[-1, -1]) if with_se else math.nan
        except EstimationError as exc:
            raise GestFitError(psi, exc) from exc
        return float(beta[-1]), se, beta

    def evaluate(self, psi):
        coef, se, _ = self.fit(psi)
        return coef, se


def gest_curve(panel: Panel, grid=DEFAULT_GRID, *, workers=None, model=None):
    """Evaluate the independence coefficient at each grid value of ``psi``.

    With ``workers > 1`` the grid fits run on a thread pool; output order
    (and values) are the same as the serial path.
    """
    psis = grid_points(*grid)
    model = model or TreatmentModel(panel)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(model.evaluate, psis))
    else:
        vals = [model.evaluate(p) for p in psis]
    return [GestCurvePoint(float(p), c, s) for p, (c, s) in zip(psis, vals)]


def _crossings(psis, coefs):
    """Grid indices where the curve hits zero or changes sign, left to right."""
    out = []
    i = 0
    while i < len(coefs):
        if coefs[i] == 0.0:
            out.append((i, i))
            # skip a run of exact zeros so it counts once
            while i + 1 < len(coefs) and coefs[i + 1] == 0.0:
                i += 1
            i += 1
            continue
        if i + 1 < len(coefs) and coefs[i + 1] != 0.0 and np.sign(coefs[i]) != np.sign(coefs[i + 1]):
            out.append((i, i + 1))
        i += 1
    return out


def solve_psi(curve, panel: Panel | None = None, *, grid=None, model=None, ftol=INDEP_TOL, xtol=BRACKET_TOL):
    """Locate the zero of the independence curve and refine it.

    The first (smallest-psi) crossing is used; if there are several a
    :class:`MultipleCrossingWarning` is issued and recorded in the result.
    Refinement bisects the bracketing grid pair, refitting the treatment model,
    until ``|coef| < ftol`` or the bracket is narrower than ``xtol``; a few
    false-position steps inside the final bracket then drive ``|coef|`` below
    ``ftol``.
    """
    if not curve:
        raise ConfigError("empty curve")
    psis = np.array([c.psi for c in curve])
    coefs = np.array([c.indep_coef for c in curve])
    if grid is None:
        step = float(psis[1] - psis[0]) if len(psis) > 1 else 0.0
        grid = (float(psis[0]), float(psis[-1]), step)
    crossings = _crossings(psis, coefs)
    if not crossings:
        side = "above" if coefs[-1] > 0 else "below"
        raise NoCrossing(
            f"independence coefficient never changes sign on [{psis[0]:g}, {psis[-1]:g}]; "
            f"the effect appears to lie {side} the grid - widen it"
        )
    notes = []
    if len(crossings) > 1:
        msg = f"multiple_crossings: {len(crossings)} sign changes, using the smallest psi"
        warnings.warn(msg, MultipleCrossingWarning, stacklevel=2)
        notes.append(msg)

    i, j = crossings[0]
    bracket = (float(psis[i]), float(psis[j]))
    terms = ("(intercept)", *panel.schema, RESID_TERM) if panel is not None else ()
    if i == j:
        return GestResult(float(psis[i]), tuple(curve), bracket, True, terms, 0.0, len(crossings), tuple(notes), tuple(grid))

    if model is None:
        if panel is None:
            raise ConfigError("refinement needs the panel")
        model = TreatmentModel(panel)
    x, fx = refine_root(model, bracket[0], float(coefs[i]), bracket[1], float(coefs[j]), ftol=ftol, xtol=xtol)
    return GestResult(
        psi_hat=x,
        curve=tuple(curve),
        crossing_bracket=bracket,
        refined=abs(fx) < ftol,
        treatment_model_terms=model.terms,
        indep_coef_at_hat=fx,
        n_crossings=len(crossings),
        warnings=tuple(notes),
        grid=tuple(grid),
    )


def refine_root(model: TreatmentModel, lo, flo, hi, fhi, *, ftol=INDEP_TOL, xtol=BRACKET_TOL):
    """Bisect ``[lo, hi]`` (opposite-signed ends), then polish by false position.

    Each refit warm-starts from the previous one; the sequence is serial so the
    result is deterministic.  Returns ``(psi, coef)``.
    """
    start = None
    x, fx = lo, flo
    for _ in range(64):
        x = 0.5 * (lo + hi)
        fx, _, start = model.fit(x, with_se=False, start=start)
        if abs(fx) < ftol:
            return x, fx
        if np.sign(fx) == np.sign(flo):
            lo, flo = x, fx
        else:
            hi, fhi = x, fx
        if hi - lo < xtol:
            break
    for _ in range(20):
        x = lo - flo * (hi - lo) / (fhi - flo)
        fx, _, start = model.fit(x, with_se=False, start=start)
        if abs(fx) < ftol:
            break
        if np.sign(fx) == np.sign(flo):
            lo, flo = x, fx
        else:
            hi, fhi = x, fx
    return float(x), float(fx)


def brent_root(model: TreatmentModel, lo, flo, hi, fhi, *, xtol=1e-9):
    """Brent's method on the bracket: bisection-safeguarded, fewer refits.

    Refits warm-start from the previous one.  ``xtol=1e-9`` leaves the
    independence coefficient well inside 1e-6 for any realistic curve slope.
    """
    start = None

    def f(psi):
        nonlocal start
        if psi == lo:
            return flo
        if psi == hi:
            return fhi
        coef, _, start = model.fit(psi, with_se=False, start=start)
        return coef

    return float(optimize.brentq(f, lo, hi, xtol=xtol))


def g_estimate(panel: Panel, grid=DEFAULT_GRID, *, workers=None) -> GestResult:
    model = TreatmentModel(panel)
    curve = gest_curve(panel, grid, workers=workers, model=model)
    return solve_psi(curve, panel, grid=grid, model=model)


def walk_estimate(panel: Panel, center, grid=DEFAULT_GRID, *, max_steps=None):
    """Bracket search that walks the grid outward from the point nearest ``center``.

    Only the grid points needed to find the first sign change are fitted.  On a
    monotone curve the result equals :func:`g_estimate`; with several crossings
    it returns the one nearest ``center`` rather than the smallest.
    """
    psis = grid_points(*grid)
    model = TreatmentModel(panel)
    k = int(np.clip(np.searchsorted(psis, center), 0, len(psis) - 1))
    fk = model.fit(psis[k], with_se=False)[0]
    if fk == 0.0:
        return float(psis[k])
    # positive coefficient means psi is still too small
    direction = 1 if fk > 0 else -1
    steps = 0
    while True:
        j = k + direction
        if j < 0 or j >= len(psis) or (max_steps is not None and steps >= max_steps):
            raise NoCrossing(f"no sign change walking from psi={psis[k]:g} within the grid [{psis[0]:g}, {psis[-1]:g}]")
        fj = model.fit(psis[j], with_se=False)[0]
        if fj == 0.0:
            return float(psis[j])
        if np.sign(fj) != np.sign(fk):
            lo, hi = sorted((k, j))
            flo, fhi = (fk, fj) if lo == k else (fj, fk)
            return brent_root(model, float(psis[lo]), flo, float(psis[hi]), fhi)
        k, fk = j, fj
        steps += 1


@dataclass(frozen=True)
class GestEstimator:
    """Picklable ``panel -> psi_hat`` callable for the bootstrap.

    ``search="grid"`` runs the full grid + refinement on every call.  With
    ``search="walk"`` and a ``center`` (normally the full-sample estimate) the
    bracket is found by walking outward from ``center`` instead, which is the
    speed option for resampling.
    """

    grid: tuple = DEFAULT_GRID
    search: str = "grid"
    center: float | None = None

    def __post_init__(self):
        if self.search not in ("grid", "walk"):
            raise ConfigError(f"unknown search {self.search!r}")
        if self.search == "walk" and self.center is None:
            raise ConfigError("walk search needs a center")

    def __call__(self, panel: Panel) -> float:
        if self.search == "walk":
            return walk_estimate(panel, self.center, self.grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MultipleCrossingWarning)
            return g_estimate(panel, self.grid).psi_hat


def write_curve_csv(curve, path):
    write_rows_csv(path, ["psi", "indep_coef", "se"], [(c.psi, c.indep_coef, c.se) for c in curve])
