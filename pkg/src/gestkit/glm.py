"""Weighted logistic regression by IRLS (Newton-Raphson on the log-likelihood).

This is the one fitting routine behind the propensity model, the
G-estimation treatment models and the weighted MSM.  Fits are unpenalized.
Both the model-based covariance (inverse weighted information) and the HC0
sandwich are returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, InvalidDesign, NotConverged, Separation, Singular

MAX_ITER = 100
COEF_TOL = 1e-10
DEV_TOL = 1e-12
SEPARATION_BOUND = 30.0
# A deviance-based stop is only trusted when the coefficients have also
# settled; under quasi-separation the deviance flattens while the slope
# keeps growing by ~1 per step, and must run on into the separation check.
SETTLED_STEP = 1e-4

# expit(x) rounds to exactly 1.0 for x > ~37; keep probabilities strictly interior
_P_LO = np.finfo(float).tiny
_P_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    columns: tuple
    values: np.ndarray
    intercept: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InvalidDesign("design values must be a 2-D matrix")
        n, p = v.shape
        if len(self.columns) != p:
            raise InvalidDesign(f"{len(self.columns)} column names for {p} columns")
        if not np.isfinite(v).all():
            raise InvalidDesign("design matrix contains non-finite values")
        if n < p:
            raise InvalidDesign(f"n={n} rows is fewer than p={p} columns")
        zero = ~v.any(axis=0)
        if zero.any():
            raise InvalidDesign(f"constant-zero column(s): {[c for c, z in zip(self.columns, zero) if z]}")
        if self.intercept and not (v[:, 0] == 1.0).all():
            raise InvalidDesign("intercept flag set but first column is not all ones")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_columns(cls, named, intercept=True):
        """Build from an ordered mapping/list of ``(name, vector)`` pairs."""
        items = list(named.items()) if isinstance(named, dict) else list(named)
        n = len(items[0][1]) if items else 0
        cols, vals = [], []
        if intercept:
            cols.append("(intercept)")
            vals.append(np.ones(n))
        for name, vec in items:
            cols.append(name)
            vals.append(np.asarray(vec, dtype=float))
        return cls(tuple(cols), np.column_stack(vals) if vals else np.zeros((n, 0)), intercept)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coefficients: np.ndarray
    cov_model: np.ndarray
    cov_sandwich: np.ndarray
    converged: bool
    n_iter: int
    deviance: float
    columns: tuple = ()
    max_score: float = 0.0

    @property
    def se_model(self):
        return np.sqrt(np.diag(self.cov_model))

    @property
    def se_sandwich(self):
        return np.sqrt(np.diag(self.cov_sandwich))

    def coef(self, name):
        return float(self.coefficients[self.columns.index(name)])

    def to_dict(self):
        return {
            "columns": list(self.columns),
            "coefficients": self.coefficients.tolist(),
            "se_model": self.se_model.tolist(),
            "se_sandwich": self.se_sandwich.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "deviance": self.deviance,
        }


def _deviance(eta, y, w):
    # -2 * weighted Bernoulli log-likelihood: sum w * (softplus(eta) - y * eta)
    softplus = np.log1p(np.exp(-np.abs(eta))) + np.maximum(eta, 0.0)
    return 2.0 * float(w @ (softplus - y * eta))


def irls(X, y, w, start=None, max_iter=MAX_ITER):
    """Bare IRLS on arrays.  Returns ``(beta, info, mu, n_iter, deviance)``.

    ``info`` is the weighted Fisher information at the returned ``beta``.
    Raises :class:`Separation`, :class:`Singular` or :class:`NotConverged`.
    """
    n, p = X.shape
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    eta = X @ beta
    mu = expit(eta)
    dev = _deviance(eta, y, w)
    for it in range(1, max_iter + 1):
        wv = w * mu * (1.0 - mu)
        info = X.T @ (X * wv[:, None])
        score = X.T @ (w * (y - mu))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise Singular(f"information matrix not invertible at iteration {it}") from exc
        if not np.isfinite(step).all():
            raise Singular(f"non-finite Newton step at iteration {it}")
        t = 1.0
        for _ in range(40):
            new = beta + t * step
            eta_new = X @ new
            dev_new = _deviance(eta_new, y, w)
            if dev_new <= dev * (1.0 + 1e-14) + 1e-300:
                break
            t *= 0.5
        if np.abs(new).max(initial=0.0) > SEPARATION_BOUND:
            raise Separation(
                f"coefficients diverging (max |beta| = {np.abs(new).max():.1f} > {SEPARATION_BOUND:g}); "
                "fitted probabilities pinned at 0/1"
            )
        dbeta = np.abs(new - beta).max(initial=0.0)
        ddev = abs(dev - dev_new)
        beta, eta, dev = new, eta_new, dev_new
        mu = expit(eta)
        if dbeta < COEF_TOL or (ddev < DEV_TOL * abs(dev) and dbeta < SETTLED_STEP):
            wv = w * mu * (1.0 - mu)
            return beta, X.T @ (X * wv[:, None]), mu, it, dev
    raise NotConverged(f"IRLS hit the iteration cap ({max_iter})")


def inverse_information(info):
    if not np.isfinite(info).all() or np.linalg.cond(info) > 1e13:
        raise Singular("information matrix is numerically singular")
    inv = np.linalg.inv(info)
    return (inv + inv.T) / 2.0


def fit_logistic(X, y, w=None, *, start=None, max_iter=MAX_ITER) -> LogisticFit:
    """Maximize the (weighted) Bernoulli log-likelihood of ``y`` on ``X``.

    Parameters
    ----------
    X : DesignMatrix or 2-D array
    y : vector of 0/1 responses (fractional values are accepted)
    w : optional non-negative case weights; ``None`` means all ones
    start : optional starting coefficients (warm start)

    The iteration stops when the largest coefficient change falls below
    1e-10 or the relative deviance change below 1e-12 (the latter only once
    the coefficient step is itself small, so a quasi-separated fit keeps
    diverging until :class:`Separation` is raised).  A step that raises the
    deviance is halved until it does not.
    """
    if isinstance(X, DesignMatrix):
        columns, Xv = X.columns, X.values
    else:
        Xv = np.asarray(X, dtype=float)
        columns = tuple(f"x{j}" for j in range(Xv.shape[1]))
    y = np.asarray(y, dtype=float)
    n, p = Xv.shape
    if y.shape != (n,):
        raise DimensionMismatch(f"y has shape {y.shape}, design has {n} rows")
    if w is None:
        w = np.ones(n)
    else:
        w = np.asarray(w, dtype=float)
        if w.shape != (n,):
            raise DimensionMismatch(f"w has shape {w.shape}, design has {n} rows")
        if not np.isfinite(w).all() or (w < 0).any() or not (w > 0).any():
            raise ValueError("weights must be finite, non-negative and not all zero")

    beta, info, mu, n_iter, dev = irls(Xv, y, w, start=start, max_iter=max_iter)
    bread = inverse_information(info)
    resid = w * (y - mu)
    meat = Xv.T @ (Xv * (resid**2)[:, None])
    sandwich = bread @ meat @ bread
    sandwich = (sandwich + sandwich.T) / 2.0
    score = Xv.T @ resid
    return LogisticFit(
        coefficients=beta,
        cov_model=bread,
        cov_sandwich=sandwich,
        converged=True,
        n_iter=n_iter,
        deviance=dev,
        columns=tuple(columns),
        max_score=float(np.abs(score).max(initial=0.0)),
    )


def predict_prob(fit: LogisticFit, X) -> np.ndarray:
    Xv = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if Xv.ndim != 2 or Xv.shape[1] != len(fit.coefficients):
        raise DimensionMismatch(f"design has {Xv.shape[-1]} columns, fit has {len(fit.coefficients)}")
    return np.clip(expit(Xv @ fit.coefficients), _P_LO, _P_HI)


def log_likelihood(beta, X, y, w=None):
    eta = np.asarray(X) @ beta
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    return -0.5 * _deviance(eta, np.asarray(y, dtype=float), w)


def score(beta, X, y, w=None):
    """Analytic gradient of :func:`log_likelihood`."""
    X = np.asarray(X, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    return X.T @ (w * (np.asarray(y, dtype=float) - expit(X @ beta)))
