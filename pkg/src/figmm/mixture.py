"""Gaussian mixtures with a shared covariance matrix."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import OutlierRecordError
from .gaussian import LOG_2PI, GaussianParams, ObservedPattern, pattern_block, safe_cholesky


def canonical_order(means):
    """Permutation sorting components lexicographically by mean coordinates."""
    means = np.asarray(means)
    return np.lexsort(means.T[::-1])


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """f(y) = sum_g alpha_g N(y; means[g], cov)."""

    alpha: np.ndarray
    means: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.array(self.alpha, dtype=float))
        means = np.atleast_2d(np.array(self.means, dtype=float))
        cov = np.atleast_2d(np.array(self.cov, dtype=float))
        G, p = means.shape
        if alpha.shape != (G,):
            raise ValueError(f"alpha has shape {alpha.shape}, expected ({G},)")
        if cov.shape != (p, p):
            raise ValueError(f"cov has shape {cov.shape}, expected ({p}, {p})")
        if abs(alpha.sum() - 1.0) > 1e-12:
            raise ValueError(f"alpha sums to {alpha.sum()!r}, not 1")
        if G > 1 and (np.any(alpha <= 0) or np.any(alpha >= 1)):
            raise ValueError("alpha entries must lie in (0, 1)")
        if G > 1:
            d = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((d * d).sum(-1))[np.triu_indices(G, 1)]
            if dist.min() <= 0:
                raise ValueError("component means must be pairwise distinct")
        for a in (alpha, means, cov):
            a.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cov", cov)
        _ = self.chol

    @property
    def G(self):
        return self.means.shape[0]

    @property
    def p(self):
        return self.means.shape[1]

    @cached_property
    def chol(self):
        return safe_cholesky(self.cov)

    def component(self, g):
        return GaussianParams(self.means[g], self.cov, component=g)

    def canonical(self):
        order = canonical_order(self.means)
        if np.array_equal(order, np.arange(self.G)):
            return self
        return GaussianMixture(self.alpha[order], self.means[order], self.cov)

    def log_prior(self, level_codes):
        n = len(level_codes)
        return np.broadcast_to(np.log(self.alpha), (n, self.G))

    def logpdf(self, y):
        """Mixture log density of fully observed rows."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        z = linalg.solve_triangular(self.chol, (y[:, None, :] - self.means).reshape(-1, self.p).T,
                                    lower=True)
        q = np.sum(z * z, axis=0).reshape(y.shape[0], self.G)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        comp = -0.5 * (self.p * LOG_2PI + logdet + q) + np.log(self.alpha)
        return logsumexp(comp, axis=1)

    def sample(self, n, rng):
        z = rng.choice(self.G, size=n, p=self.alpha)
        y = self.means[z] + rng.standard_normal((n, self.p)) @ self.chol.T
        return y, z

    # --- serialization -------------------------------------------------
    def to_text(self):
        fmt = lambda row: " ".join(f"{x:.17g}" for x in row)  # noqa: E731
        lines = [f"{self.G} {self.p}", fmt(self.alpha)]
        lines += [fmt(m) for m in self.means]
        lines += [fmt(c) for c in self.cov]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        G, p = int(rows[0][0]), int(rows[0][1])
        if len(rows) != 2 + G + p:
            raise ValueError(f"expected {2 + G + p} lines, found {len(rows)}")
        num = [[float(x) for x in r] for r in rows[1:]]
        return cls(np.array(num[0]), np.array(num[1:1 + G]), np.array(num[1 + G:]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def observed_logpdf_matrix(data, means, cov, return_blocks=False):
    """(n, G) matrix of log N(y_i,obs; means[g, obs], cov[obs, obs]).

    Fully missing records get 0 (the density of an empty observation).
    """
    means = np.asarray(means)
    G = means.shape[0]
    out = np.zeros((data.n, G))
    blocks = []
    for pattern, rows in data.pattern_groups:
        blk = pattern_block(cov, pattern.mask)
        blocks.append(blk)
        obs = blk.observed
        if obs.size == 0:
            continue
        y = data.values[np.ix_(rows, obs)]
        r = y[:, None, :] - means[None, :, obs]                 # (m, G, o)
        z = linalg.solve_triangular(blk.chol_obs, r.reshape(-1, obs.size).T, lower=True)
        q = np.sum(z * z, axis=0).reshape(rows.size, G)
        out[rows] = -0.5 * (obs.size * LOG_2PI + blk.logdet_obs + q)
    if return_blocks:
        return out, blocks
    return out


def normalize_log_posterior(logp, record_index=None):
    """Row-normalize log-weights with max subtraction; returns probabilities."""
    mx = np.max(logp, axis=1, keepdims=True)
    bad = ~np.isfinite(mx[:, 0])
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise OutlierRecordError(i if record_index is None else record_index[i])
    w = np.exp(logp - mx)
    return w / w.sum(axis=1, keepdims=True)


def posterior_matrix(data, model, logpdf=None):
    if logpdf is None:
        logpdf = observed_logpdf_matrix(data, model.means, model.cov)
    _, codes = data.levels
    return normalize_log_posterior(model.log_prior(codes) + logpdf)


def posterior_membership(values, pattern, model, record=None):
    """Posterior component probabilities for one partially observed record.

    ``values`` holds the observed coordinates only. A record with nothing
    observed gets the prior.
    """
    if pattern.obs_count == 0:
        return np.array(model.alpha, dtype=float)
    values = np.asarray(values, dtype=float).ravel()
    obs = pattern.observed
    sub_cov = model.cov[np.ix_(obs, obs)]
    L = safe_cholesky(sub_cov)
    r = values[None, :] - model.means[:, obs]
    z = linalg.solve_triangular(L, r.T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    with np.errstate(over="ignore"):
        # an overflowing distance gives -inf, reported below as an outlier
        logf = -0.5 * (obs.size * LOG_2PI + logdet + np.sum(z * z, axis=0))
    logp = (np.log(model.alpha) + logf)[None, :]
    return normalize_log_posterior(logp, [0 if record is None else record])[0]


def observed_log_likelihood(data, model, base_weights=None, logpdf=None):
    """sum_i w_i log sum_g alpha_g f(y_i,obs | g); unit weights by default."""
    if logpdf is None:
        logpdf = observed_logpdf_matrix(data, model.means, model.cov)
    _, codes = data.levels
    per_record = logsumexp(model.log_prior(codes) + logpdf, axis=1)
    per_record[data.fully_missing] = 0.0
    if base_weights is None:
        return float(per_record.sum())
    w = np.asarray(base_weights, dtype=float)
    if w.shape != (data.n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("base weights must be non-negative with positive sum")
    # a deleted record contributes nothing, even if its density underflows
    return float(np.dot(w[w > 0], per_record[w > 0]))


def record_pattern(values):
    return ObservedPattern.from_values(values)
