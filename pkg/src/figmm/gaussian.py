"""Dense multivariate normal primitives under arbitrary observed/missing splits.

All factorizations go through :func:`safe_cholesky`, which tolerates at most one
bounded ridge before declaring the matrix degenerate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import DegenerateCovarianceError

LOG_2PI = np.log(2.0 * np.pi)
RIDGE_SCALE = 1e-8


def safe_cholesky(cov, component=None):
    """Lower Cholesky factor of ``cov``.

    If the plain factorization fails, a single ridge ``1e-8 * trace/p`` is
    added; a second failure raises :class:`DegenerateCovarianceError`.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return linalg.cholesky(cov, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass
    p = cov.shape[0]
    lam = RIDGE_SCALE * np.trace(cov) / p
    if not np.isfinite(lam) or lam <= 0:
        raise DegenerateCovarianceError("covariance is not positive definite", component)
    try:
        return linalg.cholesky(cov + lam * np.eye(p), lower=True)
    except (linalg.LinAlgError, ValueError):
        raise DegenerateCovarianceError(
            "covariance is not positive definite after ridge", component
        ) from None


def symmetrize(a):
    return 0.5 * (a + a.T)


@dataclass(frozen=True, eq=False)
class ObservedPattern:
    """Which coordinates of a length-p record are observed."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool).ravel()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_values(cls, values):
        return cls(~np.isnan(np.asarray(values, dtype=float)))

    @property
    def p(self):
        return self.mask.size

    @property
    def obs_count(self):
        return int(self.mask.sum())

    @cached_property
    def observed(self):
        return np.flatnonzero(self.mask)

    @cached_property
    def missing(self):
        return np.flatnonzero(~self.mask)

    def __eq__(self, other):
        return isinstance(other, ObservedPattern) and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.mask.tobytes())

    def __repr__(self):
        return "ObservedPattern(" + "".join("1" if m else "0" for m in self.mask) + ")"


@dataclass(frozen=True, eq=False)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray
    component: int | None = field(default=None, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        scale = max(np.max(np.abs(cov)), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        # factor eagerly so invalid parameters fail at construction
        _ = self.chol

    @property
    def dim(self):
        return self.mean.size

    @cached_property
    def chol(self):
        return safe_cholesky(self.cov, self.component)

    @cached_property
    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def logpdf(self, x):
        """Log density at one point or at each row of ``x``."""
        x = np.asarray(x, dtype=float)
        z = linalg.solve_triangular(self.chol, (x - self.mean).T, lower=True)
        q = np.sum(z * z, axis=0)
        out = -0.5 * (self.dim * LOG_2PI + self.logdet + q)
        return out if x.ndim > 1 else float(out)


def marginal_log_density(values, pattern, params):
    """log N(values; mean[obs], cov[obs, obs]).

    ``values`` holds only the observed coordinates, in index order.
    """
    obs = pattern.observed
    if obs.size == 0:
        raise ValueError("pattern has no observed coordinates")
    values = np.asarray(values, dtype=float).ravel()
    if values.size != obs.size:
        raise ValueError(f"expected {obs.size} observed values, got {values.size}")
    sub = GaussianParams(params.mean[obs], params.cov[np.ix_(obs, obs)], params.component)
    return sub.logpdf(values)


def conditional_params(obs_values, pattern, params):
    """Parameters of the missing coordinates given the observed ones."""
    obs, mis = pattern.observed, pattern.missing
    if obs.size == 0 or mis.size == 0:
        raise ValueError("conditioning needs 1 <= obs_count <= p - 1")
    obs_values = np.asarray(obs_values, dtype=float).ravel()
    cov = params.cov
    L = safe_cholesky(cov[np.ix_(obs, obs)], params.component)
    A = linalg.solve_triangular(L, cov[np.ix_(obs, mis)], lower=True)
    r = linalg.solve_triangular(L, obs_values - params.mean[obs], lower=True)
    mean = params.mean[mis] + A.T @ r
    ccov = symmetrize(cov[np.ix_(mis, mis)] - A.T @ A)
    return GaussianParams(mean, ccov, params.component)


def sample_conditional(cond, count, rng):
    """``count`` i.i.d. draws from N(cond.mean, cond.cov) as rows."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z = rng.standard_normal((count, cond.dim))
    return cond.mean + z @ cond.chol.T


@dataclass(frozen=True)
class PatternBlock:
    """Cached conditioning algebra for one missingness pattern.

    For a shared covariance the regression of missing on observed coordinates
    is the same for every component, so only the mean shift is per component.
    """

    observed: np.ndarray
    missing: np.ndarray
    chol_obs: np.ndarray | None      # Cholesky of cov[obs, obs]
    logdet_obs: float
    coef: np.ndarray                 # (n_mis, n_obs): cov_mo cov_oo^{-1}
    chol_cond: np.ndarray | None     # Cholesky of the Schur complement


def pattern_block(cov, mask, component=None):
    mask = np.asarray(mask, dtype=bool)
    obs = np.flatnonzero(mask)
    mis = np.flatnonzero(~mask)
    if obs.size:
        L = safe_cholesky(cov[np.ix_(obs, obs)], component)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
    else:
        L, logdet = None, 0.0
    if mis.size and obs.size:
        A = linalg.solve_triangular(L, cov[np.ix_(obs, mis)], lower=True)
        coef = linalg.solve_triangular(L, A, lower=True, trans="T").T
        ccov = symmetrize(cov[np.ix_(mis, mis)] - A.T @ A)
        Lc = safe_cholesky(ccov, component)
    elif mis.size:
        coef = np.zeros((mis.size, 0))
        Lc = safe_cholesky(cov[np.ix_(mis, mis)], component)
    else:
        coef = np.zeros((0, obs.size))
        Lc = None
    return PatternBlock(obs, mis, L, float(logdet), coef, Lc)
