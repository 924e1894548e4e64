from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from figmm import select
from figmm.data import IncompleteDataset
from figmm.em import EmConfig
from figmm.errors import FigmmError
from figmm.mixture import GaussianMixture
from figmm.select import bic_score, default_penalty, select_g

from conftest import random_incomplete, random_spd


def test_single_record_bic():
    data = IncompleteDataset(np.array([[0.0]]))
    m = GaussianMixture([1.0], [[0.0]], [[1.0]])
    assert bic_score(data, m) == pytest.approx(2 * 0.5 * np.log(2 * np.pi), abs=1e-14)


def test_default_penalty_value():
    assert default_penalty(3, 3) == 12
    assert np.log(500) * default_penalty(3, 3) == pytest.approx(74.57, abs=0.01)


def test_bic_matches_hand_summed_oracle_and_is_order_invariant():
    rng = np.random.default_rng(0)
    data, _ = random_incomplete(rng, 50, 3, miss=0.3)
    m = GaussianMixture([0.3, 0.7], rng.normal(size=(2, 3)), random_spd(rng, 3))
    ll = 0.0
    for i in range(50):
        o = np.flatnonzero(data.observed[i])
        ll += np.log(sum(m.alpha[g] * stats.multivariate_normal(
            m.means[g, o], m.cov[np.ix_(o, o)]).pdf(data.values[i, o]) for g in range(2)))
    ref = -2 * ll + np.log(50) * 8
    assert bic_score(data, m) == pytest.approx(ref, abs=1e-9)
    perm = rng.permutation(50)
    assert bic_score(data.subset(perm), m) == pytest.approx(bic_score(data, m), abs=1e-9)


def test_singleton_range():
    data, _ = random_incomplete(np.random.default_rng(1), 40, 2)
    rep = select_g(data, [2], EmConfig(seed=0))
    assert rep.G_hat == 2 and [c.G for c in rep.candidates] == [2]
    assert rep.model.G == 2


def test_selects_three_well_separated_clusters():
    rng = np.random.default_rng(2)
    Y = np.vstack([rng.normal(c, 1.0, size=(80, 2)) for c in (-6.0, 0.0, 6.0)])
    Y[rng.random(240) < 0.3, 1] = np.nan
    rep = select_g(IncompleteDataset(Y), range(1, 5), EmConfig(seed=1))
    assert rep.G_hat == 3
    bics = dict(rep.table())
    assert bics[3] == min(bics.values())


def fake_run_em(logliks):
    def run(data, G, config=None, init=None, seed_key=()):
        if logliks[G] is None:
            raise FigmmError("boom")
        ll = logliks[G]
        return SimpleNamespace(loglik=ll, trace=[ll] * 6, model=f"model{G}")
    return run


def test_ties_go_to_smaller_g(monkeypatch):
    monkeypatch.setattr(select, "run_em", fake_run_em({1: -10.0, 2: -10.0, 3: -10.0}))
    data = IncompleteDataset(np.zeros((20, 2)))
    assert select_g(data, [3, 2, 1], penalty=lambda G, p: 0.0).G_hat == 1


def test_zero_penalty_is_maximum_likelihood(monkeypatch):
    monkeypatch.setattr(select, "run_em", fake_run_em({1: -12.0, 2: -9.0, 3: -8.5, 4: -8.7}))
    data = IncompleteDataset(np.zeros((20, 2)))
    rep = select_g(data, range(1, 5), penalty=lambda G, p: 0.0)
    assert rep.G_hat == 3
    assert select_g(data, range(1, 5)).G_hat == 1


def test_failures_and_flags_are_reported(monkeypatch):
    monkeypatch.setattr(select, "run_em", fake_run_em({1: -10.0, 2: None, 3: -50.0}))
    data = IncompleteDataset(np.zeros((20, 2)))
    rep = select_g(data, [1, 2, 3], penalty=lambda G, p: 0.0)
    assert rep.G_hat == 1
    assert rep[2].error is not None and rep[3].flagged
    assert len(rep.warnings) == 2
    monkeypatch.setattr(select, "run_em", fake_run_em({1: None}))
    with pytest.raises(FigmmError):
        select_g(data, [1])


def test_range_validation():
    data = IncompleteDataset(np.zeros((5, 1)))
    with pytest.raises(ValueError):
        select_g(data, [])
    with pytest.raises(ValueError):
        select_g(data, [0, 1])
