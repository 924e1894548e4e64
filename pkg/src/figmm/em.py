"""Monte Carlo EM for fractional imputation under a shared-covariance mixture.

Each iteration draws imputations for the incomplete records (I-step), attaches
fractional weights p_ig / M_ig to them (W-step) and refits the mixture from the
weighted completions in closed form (M-step).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import ComponentCollapseError, ConfigurationError, FigmmError, InitializationError
from .gaussian import LOG_2PI, pattern_block, safe_cholesky
from .mixture import GaussianMixture, normalize_log_posterior, observed_logpdf_matrix

ALLOCATION_MODES = ("deterministic", "stochastic")
ALPHA_UPDATES = ("allocation", "posterior")
# spawn-key tags separating random streams by purpose
INIT_STREAM, EM_STREAM, RESTART_STREAM = 1, 2, 3


@dataclass(frozen=True)
class EmConfig:
    M: int = 50
    max_iter: int = 500
    loglik_rel_tol: float = 1e-6
    min_component_prob: float = 1e-8
    seed: int = 0
    allocation_mode: str = "deterministic"
    restarts: int = 5
    init_iter: int = 3
    # "posterior": alpha_g = mean_i p_ig, the maximizer of the weighted Q function;
    # "allocation": alpha_g = mean_i M_ig / M, which the one-draw minimum pulls toward 1/M
    alpha_update: str = "posterior"
    cov_floor: float = 1e-10

    def __post_init__(self):
        if self.M < 1:
            raise ConfigurationError("M must be >= 1")
        if self.max_iter < 0:
            raise ConfigurationError("max_iter must be >= 0")
        if not 0 <= self.min_component_prob <= 0.01:
            raise ConfigurationError("min_component_prob must lie in [0, 0.01]")
        if self.allocation_mode not in ALLOCATION_MODES:
            raise ConfigurationError(f"allocation_mode must be one of {ALLOCATION_MODES}")
        if self.alpha_update not in ALPHA_UPDATES:
            raise ConfigurationError(f"alpha_update must be one of {ALPHA_UPDATES}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.loglik_rel_tol < 0:
            raise ConfigurationError("loglik_rel_tol must be >= 0")


def stream(seed, *key):
    """Independent generator for ``(seed, key...)``; same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


# --------------------------------------------------------------------------
# fractional imputation container
# --------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FractionalImputation:
    """Imputed completions and fractional weights for every record.

    Draws of incomplete records are stored sorted by (record, component).
    Fully observed records carry no draws; in the long-form view they appear
    once with weight 1, and in the expanded (per-component) view they appear
    once per component with weight ``posterior[i, g]``.
    """

    data: object
    M: int
    posterior: np.ndarray          # (n, G), renormalized over retained components
    counts: np.ndarray             # (n, G) allocation counts; 0 for complete records
    draw_record: np.ndarray        # (D,)
    draw_component: np.ndarray     # (D,)
    draw_values: np.ndarray        # (D, p)
    draw_logcond: np.ndarray       # (D,) log density of the draw's missing part
    log_prior: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.posterior.shape[0]

    @property
    def G(self):
        return self.posterior.shape[1]

    @property
    def p(self):
        return self.draw_values.shape[1]

    @property
    def fully_observed(self):
        return self.data.fully_observed

    @cached_property
    def draw_weights(self):
        r, g = self.draw_record, self.draw_component
        return self.posterior[r, g] / self.counts[r, g]

    def allocation_shares(self):
        """M_ig / M for incomplete records, p_ig for fully observed ones."""
        share = self.counts / float(self.M)
        full = self.fully_observed
        share[full] = self.posterior[full]
        return share

    def record_weight_sums(self):
        s = np.bincount(self.draw_record, weights=self.draw_weights, minlength=self.n)
        s[self.fully_observed] = 1.0
        return s

    @cached_property
    def expanded(self):
        """(record, component, values, weights) with complete records split by component."""
        full = np.flatnonzero(self.fully_observed)
        G = self.G
        rec = np.concatenate([np.repeat(full, G), self.draw_record])
        comp = np.concatenate([np.tile(np.arange(G), full.size), self.draw_component])
        order = np.argsort(rec, kind="stable")
        rec, comp = rec[order], comp[order]
        values = np.concatenate([self.data.values[np.repeat(full, G)], self.draw_values])[order]
        weights = np.concatenate([self.posterior[full].ravel(), self.draw_weights])[order]
        return rec, comp, values, weights

    def long_form(self):
        """Collapsed view: (record, component, draw_index, weight, values).

        Complete records appear once with component -1 and weight 1.
        """
        full = np.flatnonzero(self.fully_observed)
        rec = np.concatenate([full, self.draw_record])
        comp = np.concatenate([np.full(full.size, -1), self.draw_component])
        values = np.concatenate([self.data.values[full], self.draw_values])
        weights = np.concatenate([np.ones(full.size), self.draw_weights])
        order = np.lexsort((comp, rec))
        rec, comp, values, weights = rec[order], comp[order], values[order], weights[order]
        # draw index within (record, component)
        key = rec * (self.G + 1) + comp + 1
        start = np.r_[0, np.flatnonzero(np.diff(key)) + 1]
        idx = np.arange(rec.size) - np.repeat(start, np.diff(np.r_[start, rec.size]))
        return rec, comp, idx, weights, values


# --------------------------------------------------------------------------
# I-step and W-step
# --------------------------------------------------------------------------
def allocate_counts(P, M, mode="deterministic", rng=None, eps=1e-8):
    """Split M imputations across components for each row of posteriors ``P``.

    Components with probability <= eps get nothing; every retained component
    gets at least one draw and the remaining M - (#retained) draws follow the
    renormalized posterior (largest remainders, or a multinomial draw).
    Returns ``(counts, renormalized P)``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m, G = P.shape
    retained = P > eps
    r = retained.sum(axis=1)
    if np.any(r > M):
        raise ConfigurationError(
            f"M={M} is smaller than the number of retained components ({int(r.max())})"
        )
    Pr = np.where(retained, P, 0.0)
    Pr /= Pr.sum(axis=1, keepdims=True)
    rest = M - r
    if mode == "deterministic":
        quota = rest[:, None] * Pr
        fl = np.floor(quota)
        left = rest - fl.sum(axis=1).astype(int)
        frac = np.where(retained, quota - fl, -1.0)
        order = np.argsort(-frac, axis=1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(G)[None, :].repeat(m, 0), axis=1)
        extra = ranks < left[:, None]
        counts = retained.astype(np.int64) + fl.astype(np.int64) + extra
    elif mode == "stochastic":
        if rng is None:
            raise ConfigurationError("stochastic allocation needs an rng")
        counts = retained.astype(np.int64) + rng.multinomial(rest, Pr)
    else:
        raise ConfigurationError(f"unknown allocation mode {mode!r}")
    return counts, Pr


def allocate_imputations(posterior, M, mode="deterministic", rng=None, eps=1e-8):
    """Allocation counts (M_i1, ..., M_iG) for one record."""
    counts, _ = allocate_counts(np.asarray(posterior)[None, :], M, mode, rng, eps)
    return counts[0]


def pattern_index(data):
    idx = np.empty(data.n, dtype=np.intp)
    for k, (_, rows) in enumerate(data.pattern_groups):
        idx[rows] = k
    return idx


def draw_log_conditional(draw_values, draw_record, draw_component, means, cov, logpdf):
    """log f(y_mis | y_obs, z_g = 1) for each draw as joint minus marginal."""
    chol = safe_cholesky(cov)
    p = cov.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    q = kernels.quadform_by_component(draw_values, draw_component, means, chol)
    joint = -0.5 * (p * LOG_2PI + logdet + q)
    return joint - logpdf[draw_record, draw_component]


def impute(data, log_prior, means, cov, config, rng, logpdf=None, blocks=None):
    """I-step and W-step under component parameters and per-record log priors."""
    means = np.asarray(means, dtype=float)
    G, p = means.shape
    if logpdf is None or blocks is None:
        logpdf, blocks = observed_logpdf_matrix(data, means, cov, return_blocks=True)
    post = normalize_log_posterior(log_prior + logpdf)
    full = data.fully_observed
    inc = np.flatnonzero(~full)
    counts = np.zeros((data.n, G), dtype=np.int64)
    M = config.M
    if inc.size:
        c, pr = allocate_counts(post[inc], M, config.allocation_mode, rng,
                                config.min_component_prob)
        counts[inc] = c
        post[inc] = pr
        z = rng.standard_normal((inc.size, M, p))
    D = inc.size * M
    draw_record = np.repeat(inc, M)
    draw_component = np.repeat(np.tile(np.arange(G), inc.size), counts[inc].ravel())
    draw_values = data.values[draw_record].copy() if D else np.empty((0, p))
    if D:
        zflat = z.reshape(D, p)
        pidx = pattern_index(data)[draw_record]
        for k, blk in enumerate(blocks):
            mis = blk.missing
            if mis.size == 0:
                continue
            sel = np.flatnonzero(pidx == k)
            if sel.size == 0:
                continue
            rec, g = draw_record[sel], draw_component[sel]
            cmean = means[g][:, mis]
            if blk.observed.size:
                resid = data.values[rec][:, blk.observed] - means[g][:, blk.observed]
                cmean = cmean + resid @ blk.coef.T
            fill = cmean + zflat[sel, :mis.size] @ blk.chol_cond.T
            draw_values[np.ix_(sel, mis)] = fill
    logcond = draw_log_conditional(draw_values, draw_record, draw_component, means, cov, logpdf)
    return FractionalImputation(data, M, post, counts, draw_record, draw_component,
                                draw_values, logcond, log_prior=log_prior)


def i_step(data, model, config, rng):
    """Draw a fractional imputation of ``data`` under ``model``."""
    _, codes = data.levels
    return impute(data, model.log_prior(codes), model.means, model.cov, config, rng)


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------
def floor_covariance(cov, rel=1e-10):
    cov = 0.5 * (cov + cov.T)
    p = cov.shape[0]
    floor = rel * np.trace(cov) / p
    w, V = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def component_update(rec, comp, values, weights, G, total_weight, iteration=None, cov_floor=1e-10):
    """Weighted means per component and the pooled covariance."""
    mass, means, scatter = kernels.weighted_component_stats(values, comp, weights, G)
    for g in range(G):
        if not mass[g] > 0:
            raise ComponentCollapseError(g, iteration)
    cov = floor_covariance(scatter / total_weight, cov_floor)
    return means, cov


def m_step(data, imputation, config=None, iteration=None):
    """Closed-form update of (alpha, means, shared covariance)."""
    config = config or EmConfig()
    rec, comp, values, weights = imputation.expanded
    means, cov = component_update(rec, comp, values, weights, imputation.G, float(data.n),
                                  iteration, config.cov_floor)
    if config.alpha_update == "allocation":
        alpha = imputation.allocation_shares().mean(axis=0)
    else:
        alpha = imputation.posterior.mean(axis=0)
    alpha = alpha / alpha.sum()
    for g in np.flatnonzero(alpha <= 0):
        raise ComponentCollapseError(int(g), iteration)
    return GaussianMixture(alpha, means, cov).canonical()


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------
@dataclass
class EmResult:
    model: object
    imputation: FractionalImputation
    trace: list
    converged: bool
    n_iter: int
    warnings: list = field(default_factory=list)

    @property
    def loglik(self):
        return self.trace[-1]


def smoothed_converged(trace, tol, window=3):
    """Relative change of the trailing moving average is below ``tol``."""
    t = len(trace) - 1
    if t < 2:
        return False
    cur = np.mean(trace[max(0, t - window + 1):t + 1])
    prev = np.mean(trace[max(0, t - window):t])
    return abs(cur - prev) <= tol * abs(cur)


def _loglik(log_prior, logpdf, data):
    per = logsumexp(log_prior + logpdf, axis=1)
    per[data.fully_missing] = 0.0
    return float(per.sum())


def iterate_em(data, model, config, seed_key, max_iter, check=True, m_update=None):
    """Run I/W/M iterations from ``model``; returns an :class:`EmResult`."""
    m_update = m_update or (lambda d, imp, it: m_step(d, imp, config, it))
    _, codes = data.levels
    trace = []
    converged = False
    t = 0
    while True:
        logpdf, blocks = observed_logpdf_matrix(data, model.means, model.cov, return_blocks=True)
        log_prior = model.log_prior(codes)
        trace.append(_loglik(log_prior, logpdf, data))
        if check and smoothed_converged(trace, config.loglik_rel_tol):
            converged = True
        rng = stream(config.seed, *seed_key, t)
        imp = impute(data, log_prior, model.means, model.cov, config, rng, logpdf, blocks)
        if converged or t >= max_iter:
            break
        model = m_update(data, imp, t + 1)
        t += 1
    res = EmResult(model, imp, trace, converged, t)
    if check and not converged:
        res.warnings.append(f"not converged after {t} iterations")
    return res


def _mean_completed(data):
    v = np.array(data.values)
    with np.errstate(invalid="ignore"):
        col = np.nanmean(np.where(data.observed, v, np.nan), axis=0)
    col = np.where(np.isfinite(col), col, 0.0)
    return np.where(data.observed, v, col)


def normal_completion(data, max_iter=100, tol=1e-8):
    """Fill missing cells with conditional means under a single normal fit.

    The normal is fitted by deterministic EM started from the mean-completed
    data. Returns ``(completed values, mean, cov)``.
    """
    X = _mean_completed(data)
    n, p = X.shape
    mu = X.mean(axis=0)
    cov = np.cov(X.T, bias=True).reshape(p, p)
    cov = cov + 1e-6 * max(np.trace(cov) / p, 1e-12) * np.eye(p)
    if data.fully_observed.all():
        return X, mu, cov
    for _ in range(max_iter):
        filled = np.array(data.values)
        extra = np.zeros((p, p))
        for pattern, rows in data.pattern_groups:
            blk = pattern_block(cov, pattern.mask)
            mis, obs = blk.missing, blk.observed
            if mis.size == 0:
                continue
            fill = np.broadcast_to(mu[mis], (rows.size, mis.size))
            if obs.size:
                fill = fill + (data.values[np.ix_(rows, obs)] - mu[obs]) @ blk.coef.T
            filled[np.ix_(rows, mis)] = fill
            extra[np.ix_(mis, mis)] += rows.size * (blk.chol_cond @ blk.chol_cond.T)
        new_mu = filled.mean(axis=0)
        R = filled - new_mu
        new_cov = floor_covariance((R.T @ R + extra) / n)
        delta = max(np.max(np.abs(new_mu - mu)), np.max(np.abs(new_cov - cov)))
        mu, cov, X = new_mu, new_cov, filled
        if delta < tol * (1.0 + np.max(np.abs(cov))):
            break
    return X, mu, cov


def _kmeanspp(X, G, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, G):
        tot = d2.sum()
        if tot <= 0:
            raise InitializationError("fewer distinct records than components")
        i = rng.choice(n, p=d2 / tot)
        centers.append(X[i])
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(X, centers, n_iter=10):
    for _ in range(n_iter):
        label = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        new = np.array([X[label == g].mean(axis=0) if np.any(label == g) else centers[g]
                        for g in range(centers.shape[0])])
        if np.array_equal(new, centers):
            break
        centers = new
    label = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return centers, label


def initialize(data, G, rng, config=None, seed_key=()):
    """Starting mixture for EM.

    Missing cells are filled by conditional means under a single normal fit;
    k-means++ seeds refined by a few Lloyd steps give the means and the pooled
    within-cluster covariance. Each of ``config.restarts`` seedings then runs
    ``config.init_iter`` EM iterations and the best observed log-likelihood wins.
    """
    config = config or EmConfig()
    X, _, _ = normal_completion(data)
    n, p = X.shape
    if np.unique(X, axis=0).shape[0] < G:
        raise InitializationError(f"fewer than {G} distinct records")
    ridge = lambda c: c + 1e-6 * max(np.trace(c) / p, 1e-12) * np.eye(p)  # noqa: E731
    if G == 1:
        R = X - X.mean(axis=0)
        return GaussianMixture(np.ones(1), X.mean(axis=0)[None, :], ridge(R.T @ R / n))
    alpha = np.full(G, 1.0 / G)
    if n <= G:
        centers = _kmeanspp(X, G, rng)
        R = X - X.mean(axis=0)
        return GaussianMixture(alpha, centers, ridge(R.T @ R / n)).canonical()
    best, best_ll, last_err = None, -np.inf, None
    for r in range(config.restarts):
        try:
            centers, label = _lloyd(X, _kmeanspp(X, G, rng))
            R = X - centers[label]
            start = GaussianMixture(alpha, centers, ridge(R.T @ R / n)).canonical()
            res = iterate_em(data, start, config, (*seed_key, RESTART_STREAM, r),
                             config.init_iter, check=False)
        except (FigmmError, ValueError) as exc:
            last_err = exc
            continue
        model = res.model
        ll = observed_ll(data, model)
        if ll > best_ll:
            best, best_ll = model, ll
    if best is None:
        raise InitializationError(f"all {config.restarts} restarts failed: {last_err}")
    return best


def observed_ll(data, model):
    _, codes = data.levels
    logpdf = observed_logpdf_matrix(data, model.means, model.cov)
    return _loglik(model.log_prior(codes), logpdf, data)


def run_em(data, G, config=None, init=None, seed_key=()):
    """Fit a G-component mixture by Monte Carlo EM.

    Returns the final model, the fractional imputation drawn under it and the
    observed log-likelihood trace.
    """
    config = config or EmConfig()
    if data.n <= G:
        raise ConfigurationError(f"need more records ({data.n}) than components ({G})")
    if init is None:
        init = initialize(data, G, stream(config.seed, *seed_key, INIT_STREAM), config, seed_key)
    return iterate_em(data, init, config, (*seed_key, EM_STREAM), config.max_iter)
