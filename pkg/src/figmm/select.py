"""Choosing the number of mixture components by observed-data BIC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em import EmConfig, observed_ll, run_em
from .errors import FigmmError


def default_penalty(G, p):
    """phi(G) = G + G p; the shared-covariance count is constant in G and dropped."""
    return G + G * p


def bic_score(data, model, penalty=default_penalty):
    """-2 * observed log-likelihood + log(n) * penalty(G, p)."""
    return -2.0 * observed_ll(data, model) + np.log(data.n) * penalty(model.G, data.p)


@dataclass
class Candidate:
    G: int
    result: object = None          # EmResult, or None when the fit failed
    loglik: float = np.nan
    penalty: float = np.nan
    bic: float = np.inf
    error: str | None = None
    flagged: bool = False          # log-likelihood dropped below the smaller-G fit

    @property
    def ok(self):
        return self.error is None and not self.flagged


@dataclass
class BicReport:
    candidates: list
    G_hat: int
    warnings: list = field(default_factory=list)

    @property
    def selected(self):
        return self[self.G_hat]

    @property
    def model(self):
        return self.selected.result.model

    def __getitem__(self, G):
        for c in self.candidates:
            if c.G == G:
                return c
        raise KeyError(G)

    def table(self):
        return [(c.G, c.bic) for c in self.candidates]


def _mc_se(trace, tail=5):
    """Monte Carlo noise of the log-likelihood from the spread of the trace tail."""
    t = np.asarray(trace[-tail:])
    return float(np.std(t, ddof=1)) if t.size > 1 else 0.0


def select_g(data, G_range, config=None, penalty=default_penalty, tie_tol=1e-9, seed_key=()):
    """Fit every G in ``G_range`` independently and select the BIC minimizer.

    A candidate whose log-likelihood falls more than three Monte Carlo standard
    errors below a smaller candidate's is flagged as an optimization failure and
    excluded. Ties within ``tie_tol`` go to the smaller G. Candidate G uses
    the random streams of ``seed_key + (G,)``.
    """
    config = config or EmConfig()
    Gs = sorted(set(int(g) for g in G_range))
    if not Gs or Gs[0] < 1:
        raise ValueError("G_range must contain positive integers")
    log_n = np.log(data.n)
    cands = []
    for G in Gs:
        c = Candidate(G)
        try:
            res = run_em(data, G, config, seed_key=(*seed_key, G))
        except FigmmError as exc:
            c.error = f"{type(exc).__name__}: {exc}"
        else:
            c.result = res
            c.loglik = res.loglik
            c.penalty = penalty(G, data.p)
            c.bic = -2.0 * c.loglik + log_n * c.penalty
        cands.append(c)
    warnings = []
    best_ll, best_se = -np.inf, 0.0
    for c in cands:
        if c.error is not None:
            warnings.append(f"G={c.G} failed: {c.error}")
            continue
        se = _mc_se(c.result.trace)
        if c.loglik < best_ll - 3.0 * max(se, best_se):
            c.flagged = True
            warnings.append(f"G={c.G} log-likelihood {c.loglik:.4f} below smaller-G fit "
                            f"{best_ll:.4f}; flagged as optimization failure")
            continue
        if c.loglik > best_ll:
            best_ll, best_se = c.loglik, se
    ok = [c for c in cands if c.ok]
    if not ok:
        raise FigmmError("every candidate G failed: " + "; ".join(warnings))
    best = ok[0]
    for c in ok[1:]:
        if c.bic < best.bic - tie_tol:
            best = c
    return BicReport(cands, best.G, warnings)
