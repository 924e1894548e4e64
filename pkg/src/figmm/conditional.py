"""Mixtures whose proportions depend on a fully observed categorical covariate.

f(y | x) = sum_g alpha_g(x) N(y; mu_g, Sigma): the covariate only moves the
mixing proportions, so component means and the shared covariance are pooled
over all levels.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .em import EmConfig, component_update, initialize, iterate_em, stream, INIT_STREAM, EM_STREAM
from .errors import ComponentCollapseError, ConfigurationError, DataError, UnknownCategoryError
from .gaussian import LOG_2PI, safe_cholesky
from .mixture import GaussianMixture, canonical_order, normalize_log_posterior, observed_logpdf_matrix

ALPHA_SMOOTHING = 1e-6


@dataclass(frozen=True, eq=False)
class ConditionalMixture:
    """Shared Gaussian components with an L x G row-stochastic table alpha_g(x)."""

    levels: tuple
    alpha_table: np.ndarray
    means: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        levels = tuple(str(v) for v in self.levels)
        table = np.atleast_2d(np.array(self.alpha_table, dtype=float))
        means = np.atleast_2d(np.array(self.means, dtype=float))
        cov = np.atleast_2d(np.array(self.cov, dtype=float))
        G, p = means.shape
        if table.shape != (len(levels), G):
            raise ValueError(f"alpha_table has shape {table.shape}, expected ({len(levels)}, {G})")
        if len(set(levels)) != len(levels):
            raise ValueError("levels must be distinct")
        if cov.shape != (p, p):
            raise ValueError(f"cov has shape {cov.shape}, expected ({p}, {p})")
        if np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("alpha_table rows must sum to 1")
        if np.any(table < 0):
            raise ValueError("alpha_table entries must be non-negative")
        for a in (table, means, cov):
            a.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "alpha_table", table)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cov", cov)
        _ = self.chol

    @property
    def G(self):
        return self.means.shape[0]

    @property
    def p(self):
        return self.means.shape[1]

    @property
    def L(self):
        return len(self.levels)

    @cached_property
    def chol(self):
        return safe_cholesky(self.cov)

    def level_code(self, level):
        try:
            return self.levels.index(str(level))
        except ValueError:
            raise UnknownCategoryError(f"category level {level!r} was not seen at fit time") from None

    def codes_for(self, category):
        return np.array([self.level_code(v) for v in category], dtype=np.intp)

    def log_prior(self, level_codes):
        with np.errstate(divide="ignore"):
            return np.log(self.alpha_table)[np.asarray(level_codes)]

    def marginal(self, level):
        """The unconditional mixture for one covariate level."""
        a = self.alpha_table[self.level_code(level)]
        keep = a > 0
        return GaussianMixture(a[keep] / a[keep].sum(), self.means[keep], self.cov)

    def canonical(self):
        order = canonical_order(self.means)
        if np.array_equal(order, np.arange(self.G)):
            return self
        return ConditionalMixture(self.levels, self.alpha_table[:, order], self.means[order], self.cov)

    # --- serialization -------------------------------------------------
    def to_text(self):
        fmt = lambda row: " ".join(f"{x:.17g}" for x in row)  # noqa: E731
        lines = [f"{self.G} {self.p} {self.L}", "\t".join(self.levels)]
        lines += [fmt(r) for r in self.alpha_table]
        lines += [fmt(m) for m in self.means]
        lines += [fmt(c) for c in self.cov]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.rstrip("\n").split("\n")
        G, p, L = (int(x) for x in lines[0].split())
        levels = tuple(lines[1].split("\t"))
        rows = [[float(x) for x in ln.split()] for ln in lines[2:] if ln.strip()]
        if len(rows) != L + G + p:
            raise ValueError(f"expected {L + G + p} numeric lines, found {len(rows)}")
        return cls(levels, np.array(rows[:L]), np.array(rows[L:L + G]), np.array(rows[L + G:]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def posterior_membership_conditional(values, pattern, level, model, record=None):
    """Posterior component probabilities for one record with covariate ``level``."""
    code = model.level_code(level)
    log_alpha = model.log_prior([code])[0]
    if pattern.obs_count == 0:
        return np.array(model.alpha_table[code])
    obs = pattern.observed
    values = np.asarray(values, dtype=float).ravel()
    L = safe_cholesky(model.cov[np.ix_(obs, obs)])
    z = linalg.solve_triangular(L, (values[None, :] - model.means[:, obs]).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    logf = -0.5 * (obs.size * LOG_2PI + logdet + np.sum(z * z, axis=0))
    return normalize_log_posterior((log_alpha + logf)[None, :], [0 if record is None else record])[0]


def conditional_m_step(data, imputation, config=None, iteration=None, smoothing=ALPHA_SMOOTHING,
                       levels=None):
    """M-step with per-level proportions and pooled component parameters."""
    config = config or EmConfig()
    rec, comp, values, weights = imputation.expanded
    G = imputation.G
    means, cov = component_update(rec, comp, values, weights, G, float(data.n), iteration,
                                  config.cov_floor)
    lv, codes = data.levels
    L = len(lv)
    if config.alpha_update == "allocation":
        share = imputation.allocation_shares()
    else:
        share = imputation.posterior
    table = np.empty((L, G))
    for g in range(G):
        table[:, g] = np.bincount(codes, weights=share[:, g], minlength=L)
    counts = np.bincount(codes, minlength=L).astype(float)
    table = table / counts[:, None]
    if smoothing > 0:
        table = table + smoothing
    table = table / table.sum(axis=1, keepdims=True)
    for g in np.flatnonzero(table.max(axis=0) <= 0):
        raise ComponentCollapseError(int(g), iteration)
    return ConditionalMixture(lv if levels is None else levels, table, means, cov).canonical()


def conditional_penalty(L):
    """phi(G) = L (G - 1) + G p for proportions varying over L levels."""
    return lambda G, p: L * (G - 1) + G * p


def run_em_conditional(data, G, config=None, init=None, seed_key=(), smoothing=ALPHA_SMOOTHING,
                       levels=None):
    """Monte Carlo EM for the covariate-dependent mixture.

    ``levels`` optionally fixes the expected level set; a level without records
    is an error. The start is the unconditional initialization with its
    proportions copied to every level.
    """
    config = config or EmConfig()
    lv, codes = data.levels
    if levels is not None:
        levels = tuple(str(v) for v in levels)
        missing = sorted(set(levels) - set(lv))
        if missing:
            raise DataError(f"category level(s) {missing} have no records")
        unknown = sorted(set(lv) - set(levels))
        if unknown:
            raise UnknownCategoryError(f"category level(s) {unknown} not in the declared level set")
        if levels != lv:
            raise ConfigurationError("declared levels must be given in sorted order")
    if data.n <= G:
        raise ConfigurationError(f"need more records ({data.n}) than components ({G})")
    if init is None:
        base = initialize(data, G, stream(config.seed, *seed_key, INIT_STREAM), config, seed_key)
        init = ConditionalMixture(lv, np.tile(base.alpha, (len(lv), 1)), base.means, base.cov)
    elif isinstance(init, GaussianMixture):
        init = ConditionalMixture(lv, np.tile(init.alpha, (len(lv), 1)), init.means, init.cov)
    elif tuple(init.levels) != lv:
        raise UnknownCategoryError("initial model levels do not match the data")

    def m_update(d, imp, it):
        return conditional_m_step(d, imp, config, it, smoothing)

    return iterate_em(data, init, config, (*seed_key, EM_STREAM), config.max_iter,
                      m_update=m_update)

