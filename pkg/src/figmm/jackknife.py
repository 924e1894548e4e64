"""Jackknife variance with importance-reweighted replicate fractional weights.

Replicate k deletes record k (base weights 1/(n-1) elsewhere) and refits the
mixture by EM over the *fixed* final draws: the W-step reweights each draw by
the ratio of its conditional density under the replicate parameters to the
density it was drawn from, and no new draws are made.

The replicate fixed point is found by a quasi-Newton iteration on
T_k(psi) - psi = 0, where T_k is one replicate W/M-step and the Jacobian of
the full-sample map T_0 is computed once (central differences) at its fixed
point and shared by all replicates. Every replicate differs from the full
sample by one record, so each converges in a handful of map evaluations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from . import kernels
from .errors import DegenerateReplicateError, FigmmError, OutlierRecordError
from .estimators import solve_weighted
from .gaussian import LOG_2PI
from .em import floor_covariance
from .mixture import GaussianMixture, observed_logpdf_matrix


@dataclass(frozen=True)
class JackknifeConfig:
    tol: float = 1e-8           # fixed-point residual, relative to 1 + max|psi|
    max_steps: int = 50
    level: float = 0.95
    groups: int | None = None   # grouped jackknife with this many groups
    alpha_smoothing: float = 0.0
    cov_floor: float = 1e-10


def jackknife_base_weights(n, k, groups=None):
    """Delete-one (or delete-group) replicate weights for replicate ``k`` (0-based).

    ``groups`` is an optional length-n array of group labels 0..K-1; replicate
    k then drops every record of group k.
    """
    if groups is None:
        if not 0 <= k < n:
            raise ValueError(f"replicate index {k} out of range for n={n}")
        w = np.full(n, 1.0 / (n - 1))
        w[k] = 0.0
        return w
    groups = np.asarray(groups)
    drop = groups == k
    if not drop.any():
        raise ValueError(f"group {k} is empty")
    w = np.where(drop, 0.0, 1.0 / (n - drop.sum()))
    return w


def jackknife_variance(theta_hat, replicates, factor=None):
    """factor * sum_k (theta_k - theta_hat)(theta_k - theta_hat)^T, factor (K-1)/K."""
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim == 1:
        reps = reps[:, None]
    K = reps.shape[0]
    factor = (K - 1) / K if factor is None else factor
    d = reps - np.atleast_1d(np.asarray(theta_hat, dtype=float))[None, :]
    V = factor * (d.T @ d)
    return 0.5 * (V + V.T)


def confidence_interval(theta, variance, level=0.95):
    """Wald interval theta +/- z_{(1+level)/2} sqrt(variance)."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    z = stats.norm.ppf(0.5 * (1.0 + level))
    half = z * np.sqrt(variance)
    return (theta - half, theta + half)


# --------------------------------------------------------------------------
# parameter packing
# --------------------------------------------------------------------------
class _Packing:
    def __init__(self, L, G, p):
        self.L, self.G, self.p = L, G, p
        self.iu = np.triu_indices(p)
        self.sizes = (L * G, G * p, len(self.iu[0]))
        self.dim = sum(self.sizes)

    def pack(self, alpha_table, means, cov):
        return np.concatenate([np.ravel(alpha_table), np.ravel(means), cov[self.iu]])

    def unpack(self, psi):
        a, m, _ = self.sizes
        alpha = psi[:a].reshape(self.L, self.G)
        means = psi[a:a + m].reshape(self.G, self.p)
        cov = np.zeros((self.p, self.p))
        cov[self.iu] = psi[a + m:]
        cov = cov + np.triu(cov, 1).T
        return alpha, means, cov


def _model_tables(model):
    if hasattr(model, "alpha_table"):
        return np.asarray(model.alpha_table)
    return np.asarray(model.alpha)[None, :]


# --------------------------------------------------------------------------
# replicate engine
# --------------------------------------------------------------------------
@dataclass
class ReplicateFit:
    k: int
    psi: np.ndarray
    row_weights: np.ndarray       # per expanded row, normalized within record
    posterior: np.ndarray         # (n, G) replicate p_ig restricted to retained cells
    steps: int
    converged: bool
    residual: float


class ReplicateEngine:
    """Replicate W/M-steps over the frozen draws of a final imputation."""

    def __init__(self, data, imputation, model, config=None):
        self.config = config or JackknifeConfig()
        self.data = data
        self.imp = imputation
        self.base_model = model
        n, G, p = data.n, imputation.G, data.p
        _, codes = data.levels
        self.codes = codes
        table = _model_tables(model)
        self.L = table.shape[0]
        self.pk = _Packing(self.L, G, p)
        self.psi_base = self.pk.pack(table, model.means, model.cov)

        rec, comp, values, _ = imputation.expanded
        self.rec, self.comp, self.values = rec, comp, np.ascontiguousarray(values)
        full = data.fully_observed
        base_lc = np.zeros(rec.size)
        is_draw = ~full[rec]
        # imputation.draw_* are sorted by (record, component), as are expanded draw rows
        base_lc[is_draw] = imputation.draw_logcond
        self.base_logcond = base_lc
        self.is_draw = is_draw
        key = rec * G + comp
        starts = np.r_[0, np.flatnonzero(np.diff(key)) + 1]
        self.cell_ptr = np.r_[starts, rec.size].astype(np.intp)
        present = np.zeros((n, G), dtype=bool)
        present[rec, comp] = True
        self.present = present
        # collapsed (long-form) rows: complete records once, draws individually
        collapse = np.empty(rec.size, dtype=np.intp)
        first = np.r_[True, rec[1:] != rec[:-1]]
        new_row = np.where(is_draw, True, first)
        collapse[:] = np.cumsum(new_row) - 1
        self.collapse = collapse
        self.collapsed_values = values[new_row]
        self.collapsed_record = rec[new_row]
        # per-pattern observed-coordinate layout for the marginal densities
        self._patterns = []
        for pattern, rows in data.pattern_groups:
            obs = pattern.observed
            if obs.size:
                self._patterns.append((rows, obs, np.ascontiguousarray(data.values[np.ix_(rows, obs)])))
        self.center = None
        self.linear = False

    def _observed_logpdf(self, means, cov):
        out = np.zeros((self.data.n, self.pk.G))
        for rows, obs, y in self._patterns:
            L = np.linalg.cholesky(cov[np.ix_(obs, obs)])
            r = (y[:, None, :] - means[None, :, obs]).reshape(-1, obs.size)
            z = linalg.solve_triangular(L, r.T, lower=True, check_finite=False)
            q = np.einsum("ij,ij->j", z, z).reshape(rows.size, -1)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[rows] = -0.5 * (obs.size * LOG_2PI + logdet + q)
        return out

    # -- one replicate W/M-step -----------------------------------------
    def weights_at(self, psi, replicate=None):
        """W-step at ``psi``: replicate posteriors and per-row fractional weights."""
        alpha, means, cov = self.pk.unpack(psi)
        logpdf = self._observed_logpdf(means, cov)
        with np.errstate(divide="ignore"):
            logpost = np.log(alpha)[self.codes] + logpdf
        logpost = np.where(self.present, logpost, -np.inf)
        mx = logpost.max(axis=1, keepdims=True)
        bad = ~np.isfinite(mx[:, 0])
        if bad.any():
            raise OutlierRecordError(int(np.flatnonzero(bad)[0]))
        post = np.exp(logpost - mx)
        post /= post.sum(axis=1, keepdims=True)

        chol = np.linalg.cholesky(cov)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        q = kernels.quadform_by_component(self.values, self.comp, means, chol)
        logcond = -0.5 * (self.pk.p * LOG_2PI + logdet + q) - logpdf[self.rec, self.comp]
        ratio = np.where(self.is_draw, logcond - self.base_logcond, 0.0)
        pi, bad_cell = kernels.segment_softmax(ratio, self.cell_ptr)
        if bad_cell >= 0:
            r0 = self.cell_ptr[bad_cell]
            raise DegenerateReplicateError(int(self.rec[r0]), int(self.comp[r0]), replicate)
        return post, post[self.rec, self.comp] * pi, pi

    def step(self, psi, base_w, replicate=None):
        """Apply T_k once; returns (T_k(psi), posteriors at psi, row weights at psi)."""
        post, roww, _ = self.weights_at(psi, replicate)
        G = self.pk.G
        w = roww * base_w[self.rec]
        total = base_w.sum()
        mass, means, scatter = kernels.weighted_component_stats(self.values, self.comp, w, G)
        old_alpha, old_means, _ = self.pk.unpack(psi)
        means = np.where(mass[:, None] > 0, means, old_means)
        cov = floor_covariance(scatter / total, self.config.cov_floor)
        share = post * base_w[:, None]
        level_w = np.bincount(self.codes, weights=base_w, minlength=self.L)
        alpha = np.empty((self.L, G))
        for g in range(G):
            alpha[:, g] = np.bincount(self.codes, weights=share[:, g], minlength=self.L)
        s = self.config.alpha_smoothing
        if s > 0:
            alpha = alpha + s * (alpha > 0)
        with np.errstate(invalid="ignore"):
            alpha = alpha / alpha.sum(axis=1, keepdims=True)
        alpha = np.where(level_w[:, None] > 0, alpha, old_alpha)
        return self.pk.pack(alpha, means, cov), post, roww

    # -- fixed point ------------------------------------------------------
    def _project(self, psi):
        alpha, means, cov = self.pk.unpack(psi)
        alpha = np.clip(alpha, 1e-300, None)
        alpha = alpha / alpha.sum(axis=1, keepdims=True)
        return self.pk.pack(alpha, means, cov)

    def _valid(self, psi):
        _, _, cov = self.pk.unpack(psi)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return False
        return True

    def jacobian(self, psi, base_w):
        dim = self.pk.dim
        J = np.empty((dim, dim))
        for j in range(dim):
            h = 1e-5 * max(1.0, abs(psi[j]))
            up, dn = psi.copy(), psi.copy()
            up[j] += h
            dn[j] -= h
            J[:, j] = (self.step(up, base_w)[0] - self.step(dn, base_w)[0]) / (2 * h)
        return J

    def _try_step(self, psi, base_w, k):
        if not (np.all(np.isfinite(psi)) and self._valid(psi)):
            return None
        try:
            out = self.step(psi, base_w, k)
        except (FigmmError, np.linalg.LinAlgError):
            return None
        return out if np.all(np.isfinite(out[0])) else None

    def solve(self, base_w, psi0, lu, k=None, max_steps=None):
        """Safeguarded quasi-Newton on T_k(psi) = psi.

        A quasi-Newton candidate is kept only if the map can be evaluated there
        and its residual does not grow; otherwise the plain W/M step is taken,
        which never leaves the parameter space.
        """
        cfg = self.config
        max_steps = cfg.max_steps if max_steps is None else max_steps
        psi = psi0.copy()
        new, post, roww = self.step(psi, base_w, k)
        for it in range(max_steps + 1):
            F = new - psi
            res = np.max(np.abs(F))
            if res <= cfg.tol * (1.0 + np.max(np.abs(psi))):
                return ReplicateFit(k, psi, roww, post, it, True, float(res))
            if it == max_steps:
                break
            cand = self._project(psi + linalg.lu_solve(lu, F))
            out = self._try_step(cand, base_w, k)
            if out is not None and np.max(np.abs(out[0] - cand)) <= res:
                psi, (new, post, roww) = cand, out
            else:
                psi = new
                new, post, roww = self.step(psi, base_w, k)
        return ReplicateFit(k, psi, roww, post, max_steps, False, float(res))

    def prepare(self):
        """Full-sample fixed point and the shared Jacobian factorization.

        If the fixed-draw map has no reachable fixed point (it can drift along
        weakly identified directions when components overlap), replicates are
        linearized instead: one quasi-Newton step from the base fit.
        """
        n = self.data.n
        w0 = np.full(n, 1.0 / n)
        I = np.eye(self.pk.dim)
        base_lu = linalg.lu_factor(I - self.jacobian(self.psi_base, w0))
        center = self.solve(w0, self.psi_base, base_lu)
        if not center.converged:
            lu = linalg.lu_factor(I - self.jacobian(center.psi, w0))
            center = self.solve(w0, center.psi, lu)
        if center.converged:
            self.linear = False
            self._lu = linalg.lu_factor(I - self.jacobian(center.psi, w0))
            self.center = center
        else:
            self.linear = True
            self._lu = base_lu
            self.center = self.linear_step(w0)
        return self.center

    def linear_step(self, base_w, k=None):
        """psi_base + (I - J)^{-1} (T_k(psi_base) - psi_base), J at psi_base."""
        anchor = self.psi_base
        new = self.step(anchor, base_w, k)[0]
        psi = self._project(anchor + linalg.lu_solve(self._lu, new - anchor))
        if not self._valid(psi):
            raise DegenerateReplicateError(-1, -1, k)
        post, roww, _ = self.weights_at(psi, k)
        return ReplicateFit(k, psi, roww, post, 1, True, float("nan"))

    def replicate(self, base_w, k=None):
        if self.center is None:
            self.prepare()
        if self.linear:
            return self.linear_step(base_w, k)
        return self.solve(base_w, self.center.psi, self._lu, k)

    def fit(self, k, groups=None):
        return self.replicate(jackknife_base_weights(self.data.n, k, groups), k)

    def collapsed_weights(self, fit, base_w):
        return np.bincount(self.collapse, weights=fit.row_weights * base_w[self.rec],
                           minlength=self.collapsed_values.shape[0])

    def model(self, psi, canonical=False):
        alpha, means, cov = self.pk.unpack(psi)
        if self.L == 1:
            m = GaussianMixture(alpha[0] / alpha[0].sum(), means, cov)
            return m.canonical() if canonical else m
        from .conditional import ConditionalMixture

        return ConditionalMixture(self.base_model.levels, alpha, means, cov)

    def observed_loglik(self, psi, base_w):
        alpha, means, cov = self.pk.unpack(psi)
        logpdf = observed_logpdf_matrix(self.data, means, cov)
        per = logsumexp(np.log(alpha)[self.codes] + logpdf, axis=1)
        per[self.data.fully_missing] = 0.0
        return float(np.dot(base_w, np.where(base_w > 0, per, 0.0)))


def replicate_fit(data, imputation, k, model, config=None, engine=None):
    """Replicate-k mixture fitted over the fixed draws of ``imputation``."""
    engine = engine or ReplicateEngine(data, imputation, model, config)
    fit = engine.fit(k)
    if not fit.converged:
        raise FigmmError(f"replicate {k} did not converge (residual {fit.residual:.3g})")
    return engine.model(fit.psi)


def replicate_fractional_weights(imputation, base_model, replicate_model, k=None):
    """Replicate fractional weights p_ig^(k) * pi_j|ig^(k) for the imputation's draws.

    Returns ``(weights, pi)`` aligned with ``imputation.draw_*``; ``pi`` are the
    importance-sampling proportions, normalized within each (record, component).
    """
    data = imputation.data
    _, codes = data.levels
    base_logpdf = observed_logpdf_matrix(data, base_model.means, base_model.cov)
    from .em import draw_log_conditional

    base_lc = draw_log_conditional(imputation.draw_values, imputation.draw_record,
                                   imputation.draw_component, base_model.means,
                                   base_model.cov, base_logpdf)
    rep_logpdf = observed_logpdf_matrix(data, replicate_model.means, replicate_model.cov)
    rep_lc = draw_log_conditional(imputation.draw_values, imputation.draw_record,
                                  imputation.draw_component, replicate_model.means,
                                  replicate_model.cov, rep_logpdf)
    rec, comp = imputation.draw_record, imputation.draw_component
    G = imputation.G
    key = rec * G + comp
    starts = np.r_[0, np.flatnonzero(np.diff(key)) + 1] if key.size else np.zeros(0, int)
    ptr = np.r_[starts, key.size].astype(np.intp)
    pi, bad = kernels.segment_softmax(rep_lc - base_lc, ptr)
    if bad >= 0:
        raise DegenerateReplicateError(int(rec[ptr[bad]]), int(comp[ptr[bad]]), k)
    present = imputation.counts > 0
    present[data.fully_observed] = True
    with np.errstate(divide="ignore"):
        logpost = replicate_model.log_prior(codes) + rep_logpdf
    logpost = np.where(present, logpost, -np.inf)
    post = np.exp(logpost - logpost.max(axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return post[rec, comp] * pi, pi


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------
@dataclass
class EstimandVariance:
    name: str
    estimate: float
    theta_hat: np.ndarray
    center: np.ndarray
    replicates: np.ndarray
    covariance: np.ndarray
    se: float
    interval: tuple
    failures: int


@dataclass
class JackknifeResult:
    estimands: list
    failures: int
    K: int
    replicate_steps: list = field(default_factory=list)
    linearized: bool = False      # replicates by one quasi-Newton step from the base fit

    def __getitem__(self, name):
        for e in self.estimands:
            if e.name == name:
                return e
        raise KeyError(name)


def jackknife(data, imputation, model, estimands, config=None, names=None):
    """Jackknife variance of each estimand's FIGMM estimate.

    The point estimate uses the final fractional weights. Deviations are taken
    around the full-sample fixed point of the replicate map (the replicate
    procedure applied with all base weights equal), which removes the common
    Monte Carlo offset between the final M-step and a fixed-draw refit.
    Non-converged replicates are set to the center and counted as failures.
    When the full-sample map has no reachable fixed point every replicate,
    and the center, is one linearized step from the base fit.
    """
    config = config or JackknifeConfig()
    names = names or [getattr(U, "name", f"theta{i}") for i, U in enumerate(estimands)]
    engine = ReplicateEngine(data, imputation, model, config)
    center_fit = engine.prepare()
    n = data.n
    w0 = np.full(n, 1.0 / n)
    base = [solve_weighted(U, *_long(imputation)).theta_hat for U in estimands]
    cw = engine.collapsed_weights(center_fit, w0)
    centers = [solve_weighted(U, engine.collapsed_values, cw).theta_hat for U in estimands]

    if config.groups:
        K = int(config.groups)
        groups = np.arange(n) % K
    else:
        K, groups = n, None
    reps = [np.empty((K, U.theta_dim)) for U in estimands]
    failures = 0
    steps = []
    for k in range(K):
        base_w = jackknife_base_weights(n, k, groups)
        try:
            fit = engine.replicate(base_w, k)
            ok = fit.converged
        except (FigmmError, np.linalg.LinAlgError):
            ok = False
        if not ok:
            failures += 1
            for r, c in zip(reps, centers):
                r[k] = c
            continue
        steps.append(fit.steps)
        cw = engine.collapsed_weights(fit, base_w)
        for r, U in zip(reps, estimands):
            r[k] = solve_weighted(U, engine.collapsed_values, cw).theta_hat
    factor = (K - 1) / K
    out = []
    for name, U, th, c, r in zip(names, estimands, base, centers, reps):
        V = jackknife_variance(c, r, factor)
        var = max(float(V[U.primary, U.primary]), 0.0)
        est = float(th[U.primary])
        out.append(EstimandVariance(name, est, th, c, r, V, float(np.sqrt(var)),
                                    confidence_interval(est, var, config.level), failures))
    return JackknifeResult(out, failures, K, steps, engine.linear)


def _long(imputation):
    _, _, _, weights, values = imputation.long_form()
    return values, weights
