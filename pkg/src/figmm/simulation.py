"""Monte Carlo study: four generating models, MAR item nonresponse, and the
Full / CC / PFI / SFI estimators of two means and two proportions.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .data import IncompleteDataset
from .em import EmConfig, run_em, stream
from .errors import DataError, FigmmError
from .estimators import builtin_mean, builtin_proportion, solve_estimating_equation, solve_weighted
from .jackknife import JackknifeConfig, jackknife
from .mixture import GaussianMixture
from .select import select_g

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3", "M4")
METHODS = ("Full", "CC", "PFI", "SFI")
ESTIMANDS = ("theta2", "theta3", "P2", "P3")
CUTOFFS = {"M1": (-2.0, -2.0), "M2": (-2.0, -2.0), "M3": (2.0, 3.0), "M4": (2.0, 5.0)}
# logit of the miss probability for items 2 and 3 as (intercept, slope on y1)
MISSING_COEF = ((-0.8, 0.4), (0.4, -0.8))

_RHO = 0.7
M1_ALPHA = np.array([0.3, 0.3, 0.4])
M1_MEANS = np.array([[-3.0, -3.0, -3.0], [1.0, 1.0, 1.0], [5.0, 5.0, 5.0]])
M1_COV = np.array([[1.0, _RHO, _RHO ** 2], [_RHO, 1.0, _RHO], [_RHO ** 2, _RHO, 1.0]])
M4_MEAN = np.array([1.0, 2.0])
M4_COV = np.array([[1.0, 0.5], [0.5, 1.0]])


@dataclass(frozen=True)
class SimModelSpec:
    model: str = "M1"
    n: int = 500

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.n < 2:
            raise ValueError("n must be >= 2")

    @property
    def cutoffs(self):
        return CUTOFFS[self.model]


def generate_population(spec, rng, n=None):
    """``n`` (default ``spec.n``) i.i.d. complete rows from the model's law."""
    n = spec.n if n is None else n
    if spec.model in ("M1", "M2"):
        mix = GaussianMixture(M1_ALPHA, M1_MEANS, M1_COV)
        y, z = mix.sample(n, rng)
        if spec.model == "M2":
            first = z == 0
            y[first] = rng.exponential(1.0, size=(first.sum(), 3))
        return y
    if spec.model == "M3":
        y1 = 1.0 + rng.standard_normal(n)
        y2 = 0.5 * y1 + rng.gamma(1.0, 1.0, n)
        y3 = y2 + rng.chisquare(1, n)
        return np.column_stack([y1, y2, y3])
    y12 = rng.multivariate_normal(M4_MEAN, M4_COV, size=n)
    y3 = y12[:, 1] ** 2 + rng.standard_normal(n)
    return np.column_stack([y12, y3])


def impose_missingness(y, rng, coef=MISSING_COEF):
    """Delete y2 and y3 independently with probabilities expit(a + b y1).

    Returns the incomplete dataset and the realized per-item missing rates.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    v = y.copy()
    u = rng.random((n, len(coef)))
    for j, (a, b) in enumerate(coef, start=1):
        with np.errstate(over="ignore"):
            prob = expit(a + b * y[:, 0])
        v[u[:, j - 1] < prob, j] = np.nan
    data = IncompleteDataset(v, columns=("y1", "y2", "y3"))
    rates = np.isnan(v).mean(axis=0)
    return data, rates


def _m3_p2(c):
    # pr(0.5 + 0.5 e1 + e2 < c), e1 ~ N(0,1), e2 ~ Exp(1)
    f = lambda e1: stats.norm.pdf(e1) * stats.expon.cdf(c - 0.5 - 0.5 * e1)  # noqa: E731
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def _m3_p3(c):
    # pr(0.5 + 0.5 e1 + e2 + e3 < c), e3 ~ chi2(1)
    def inner(e3):
        return stats.chi2.pdf(e3, 1) * _m3_p2(c - e3)

    # chi2(1) density has an integrable singularity at 0; substitute e3 = s^2
    g = lambda s: 2.0 * s * inner(s * s)  # noqa: E731
    return integrate.quad(g, 0.0, np.sqrt(max(c - 0.5, 0.0) + 80.0), epsabs=1e-12, epsrel=1e-11,
                          limit=200)[0]


def _m4_p3(c):
    f = lambda y2: stats.norm.pdf(y2, 2.0) * stats.norm.cdf(c - y2 * y2)  # noqa: E731
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


@lru_cache(maxsize=None)
def true_values(model):
    """(theta2, theta3, P2, P3) for a generating model."""
    c2, c3 = CUTOFFS[model]
    Phi = stats.norm.cdf
    if model == "M1":
        p = float(np.dot(M1_ALPHA, Phi(c2 - M1_MEANS[:, 1])))
        return (1.4, 1.4, p, p)
    if model == "M2":
        # the exponential component puts no mass below a negative cutoff
        p = float(np.dot(M1_ALPHA[1:], Phi(c2 - M1_MEANS[1:, 1])))
        return (2.6, 2.6, p, p)
    if model == "M3":
        return (1.5, 2.5, _m3_p2(c2), _m3_p3(c3))
    return (2.0, 5.0, float(Phi(c2 - 2.0)), _m4_p3(c3))


def estimating_functions(spec):
    c2, c3 = spec.cutoffs
    return [builtin_mean(1), builtin_mean(2), builtin_proportion(1, c2), builtin_proportion(2, c3)]


# --------------------------------------------------------------------------
# per-method estimates
# --------------------------------------------------------------------------
@dataclass
class MethodEstimate:
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    G: int | None = None
    failures: int = 0


def _wald_simple(y, estimands, level):
    """Point estimates and Wald intervals from fully observed rows.

    Means use s / sqrt(n) with the n - 1 divisor; proportions sqrt(p(1-p)/n).
    """
    z = stats.norm.ppf(0.5 * (1.0 + level))
    n = y.shape[0]
    est, se = [], []
    for U in estimands:
        theta = solve_weighted(U, y, np.ones(n)).theta_hat
        u = U.evaluate(theta, y)[:, 0]
        ddof = 0 if U.name.startswith("prop") else 1
        est.append(theta[0])
        se.append(np.sqrt(np.dot(u, u) / (n - ddof) / n))
    est, se = np.array(est), np.array(se)
    return MethodEstimate(est, est - z * se, est + z * se)


def complete_case_estimate(data, estimand):
    """Estimate from the fully observed records only, with unit weights."""
    cc = data.values[data.fully_observed]
    if cc.shape[0] == 0:
        raise DataError("no complete cases")
    return solve_weighted(estimand, cc, np.ones(cc.shape[0]))


def fit_figmm(data, config, G=None, gmax=6, seed_key=()):
    """The fitted mixture used by PFI (G given) or SFI (G by BIC)."""
    if G is None:
        report = select_g(data, range(1, gmax + 1), config, seed_key=seed_key)
        return report.selected.result
    return run_em(data, G, config, seed_key=(*seed_key, G))


def figmm_estimate(data, estimands, config, G=None, gmax=6, seed_key=(), jk_config=None,
                   variance=True):
    res = fit_figmm(data, config, G, gmax, seed_key)
    G_fit = res.imputation.G
    if not variance:
        est = np.array([solve_estimating_equation(res.imputation, U).theta_hat[U.primary]
                        for U in estimands])
        return MethodEstimate(est, np.full_like(est, np.nan), np.full_like(est, np.nan), G_fit)
    jk = jackknife(data, res.imputation, res.model, estimands, jk_config)
    est = np.array([e.estimate for e in jk.estimands])
    lo = np.array([e.interval[0] for e in jk.estimands])
    hi = np.array([e.interval[1] for e in jk.estimands])
    return MethodEstimate(est, lo, hi, G_fit, jk.failures)


@dataclass(frozen=True)
class StudyConfig:
    B: int = 200
    seed: int = 0
    methods: tuple = METHODS
    em: EmConfig = field(default_factory=lambda: EmConfig(loglik_rel_tol=1e-5))
    jackknife: JackknifeConfig = field(default_factory=JackknifeConfig)
    gmax: int = 6
    level: float = 0.95
    variance: bool = True
    threads: int = 1

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")


def make_replicate_data(spec, seed, rep):
    """Complete sample, incomplete sample and realized missing rates of replicate ``rep``."""
    y = generate_population(spec, stream(seed, rep, 0))
    data, rates = impose_missingness(y, stream(seed, rep, 1))
    return y, data, rates


def run_methods(y, data, spec, config, rep=0):
    """Every configured method on one replicate; failures map to ``None``."""
    estimands = estimating_functions(spec)
    em = replace(config.em, seed=config.seed)
    out = {}
    for m in config.methods:
        try:
            if m == "Full":
                out[m] = _wald_simple(y, estimands, config.level)
            elif m == "CC":
                cc = data.values[data.fully_observed]
                if cc.shape[0] < 2:
                    raise DataError("fewer than two complete cases")
                out[m] = _wald_simple(cc, estimands, config.level)
            else:
                G = 1 if m == "PFI" else None
                out[m] = figmm_estimate(data, estimands, em, G, config.gmax, (rep,),
                                        config.jackknife, config.variance)
        except (FigmmError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, method %s failed: %s", rep, m, exc)
            out[m] = None
    return out


def _replicate(args):
    spec, config, rep = args
    y, data, rates = make_replicate_data(spec, config.seed, rep)
    return run_methods(y, data, spec, config, rep), rates


@dataclass
class SimResult:
    spec: SimModelSpec
    config: StudyConfig
    truth: tuple
    estimates: dict       # method -> (B, 4) with NaN rows for failed replicates
    lower: dict
    upper: dict
    selected_G: np.ndarray
    missing_rates: np.ndarray
    failures: dict

    def mse(self, method):
        d = self.estimates[method] - np.asarray(self.truth)
        return np.nanmean(d * d, axis=0)

    def rmse_ratio(self, method):
        """100 * MSE(method) / MSE(Full)."""
        return 100.0 * self.mse(method) / self.mse("Full")

    def coverage(self, method):
        t = np.asarray(self.truth)
        lo, hi = self.lower[method], self.upper[method]
        ok = ~np.isnan(lo)
        hit = (lo <= t) & (t <= hi)
        return 100.0 * np.where(ok, hit, 0).sum(axis=0) / np.maximum(ok.sum(axis=0), 1)

    def g_histogram(self):
        g = self.selected_G[self.selected_G > 0]
        if g.size == 0:
            return {}
        vals, counts = np.unique(g, return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))

    def add_external(self, name, estimates, lower=None, upper=None):
        """Attach per-replicate estimates computed elsewhere (e.g. MICE)."""
        est = np.asarray(estimates, dtype=float)
        if est.shape != (self.config.B, len(ESTIMANDS)):
            raise ValueError(f"external estimates must have shape ({self.config.B}, {len(ESTIMANDS)})")
        self.estimates[name] = est
        self.lower[name] = np.full_like(est, np.nan) if lower is None else np.asarray(lower, float)
        self.upper[name] = np.full_like(est, np.nan) if upper is None else np.asarray(upper, float)
        self.failures[name] = int(np.isnan(est).any(axis=1).sum())

    def table(self):
        """Rows (method, estimand, rmse ratio, coverage)."""
        rows = []
        for m in self.estimates:
            r, c = self.rmse_ratio(m), self.coverage(m)
            has_ci = not np.all(np.isnan(self.lower[m]))
            for j, e in enumerate(ESTIMANDS):
                rows.append((m, e, float(r[j]), float(c[j]) if has_ci else float("nan")))
        return rows


def run_study(spec, config=None):
    """Replicate the study ``config.B`` times and aggregate per method."""
    config = config or StudyConfig()
    if config.B < 1:
        raise ValueError("B must be >= 1")
    jobs = [(spec, config, b) for b in range(config.B)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]
    E = len(ESTIMANDS)
    est = {m: np.full((config.B, E), np.nan) for m in config.methods}
    lo = {m: np.full((config.B, E), np.nan) for m in config.methods}
    hi = {m: np.full((config.B, E), np.nan) for m in config.methods}
    failures = {m: 0 for m in config.methods}
    G = np.zeros(config.B, dtype=int)
    rates = np.zeros((config.B, 3))
    for b, (out, r) in enumerate(results):
        rates[b] = r
        for m, res in out.items():
            if res is None:
                failures[m] += 1
                continue
            est[m][b], lo[m][b], hi[m][b] = res.estimate, res.lower, res.upper
            if m == "SFI":
                G[b] = res.G
    return SimResult(spec, config, true_values(spec.model), est, lo, hi, G, rates, failures)
