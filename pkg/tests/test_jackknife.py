import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from figmm.data import IncompleteDataset
from figmm.em import EmConfig, i_step, run_em, stream
from figmm.estimators import builtin_mean, builtin_proportion
from figmm.jackknife import (JackknifeConfig, ReplicateEngine, confidence_interval, jackknife,
                             jackknife_base_weights, jackknife_variance,
                             replicate_fractional_weights)
from figmm.mixture import GaussianMixture

from conftest import random_incomplete


# --- formula pieces ------------------------------------------------------------
def test_base_weight_examples():
    np.testing.assert_array_equal(jackknife_base_weights(2, 0), [0.0, 1.0])
    np.testing.assert_allclose(jackknife_base_weights(4, 2), [1 / 3, 1 / 3, 0.0, 1 / 3])
    for k in range(7):
        assert jackknife_base_weights(7, k).sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        jackknife_base_weights(3, 3)


def test_grouped_base_weights():
    groups = np.array([0, 1, 0, 1, 2])
    w = jackknife_base_weights(5, 0, groups)
    np.testing.assert_allclose(w, [0, 1 / 3, 0, 1 / 3, 1 / 3])
    with pytest.raises(ValueError):
        jackknife_base_weights(5, 3, groups)


def test_variance_formula():
    assert np.all(jackknife_variance(2.0, [2.0, 2.0, 2.0]) == 0.0)
    reps = np.array([1.0, 2.5, 3.0, 0.5])
    ref = 3 / 4 * np.sum((reps - 1.5) ** 2)
    assert jackknife_variance(1.5, reps)[0, 0] == pytest.approx(ref, abs=1e-15)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    loo = np.array([np.delete(y, k).mean() for k in range(4)])
    assert jackknife_variance(y.mean(), loo)[0, 0] == pytest.approx((5 / 3) / 4, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_variance_matrix_is_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    V = jackknife_variance(rng.normal(size=3), rng.normal(size=(9, 3)))
    np.testing.assert_array_equal(V, V.T)
    assert np.linalg.eigvalsh(V).min() > -1e-12


def test_confidence_interval():
    assert confidence_interval(1.5, 0.0) == (1.5, 1.5)
    lo, hi = confidence_interval(0.0, 1.0, 0.95)
    assert lo == pytest.approx(-1.96, abs=1e-3) and hi == pytest.approx(1.96, abs=1e-3)
    with pytest.raises(ValueError):
        confidence_interval(0.0, -1.0)


# --- replicate fractional weights ----------------------------------------------------
def one_dim_imputation(M, seed=0):
    data = IncompleteDataset(np.array([[np.nan], [0.5], [-0.3]]))
    base = GaussianMixture([1.0], [[0.0]], [[1.0]])
    return data, base, i_step(data, base, EmConfig(M=M), stream(seed))


def test_three_draw_importance_ratios():
    data, base, imp = one_dim_imputation(3)
    rep = GaussianMixture([1.0], [[0.1]], [[1.0]])
    w, pi = replicate_fractional_weights(imp, base, rep)
    y = imp.draw_values[:, 0]
    r = np.exp(0.1 * y - 0.005)
    np.testing.assert_allclose(pi, r / r.sum(), atol=1e-12)
    np.testing.assert_allclose(w, r / r.sum(), atol=1e-12)


def test_single_draw_cell_has_unit_ratio():
    data, base, imp = one_dim_imputation(1)
    w, pi = replicate_fractional_weights(imp, base, GaussianMixture([1.0], [[3.0]], [[2.0]]))
    np.testing.assert_array_equal(pi, [1.0])


def test_unchanged_parameters_reproduce_final_weights():
    rng = np.random.default_rng(1)
    data, _ = random_incomplete(rng, 40, 3, miss=0.3)
    m = GaussianMixture([0.4, 0.6], [[-1.0, 0.0, 0.0], [1.0, 1.0, 1.0]], np.eye(3))
    imp = i_step(data, m, EmConfig(M=8), stream(2))
    w, pi = replicate_fractional_weights(imp, m, m)
    np.testing.assert_allclose(w, imp.draw_weights, atol=1e-12)
    key = imp.draw_record * 2 + imp.draw_component
    np.testing.assert_allclose(np.bincount(key, weights=pi)[np.unique(key)], 1.0, atol=1e-12)


# --- replicate fits ------------------------------------------------------------------
def test_complete_data_replicate_is_leave_one_out_mean():
    rng = np.random.default_rng(3)
    Y = rng.normal(size=(12, 2))
    data = IncompleteDataset(Y)
    res = run_em(data, 1, EmConfig(seed=0))
    eng = ReplicateEngine(data, res.imputation, res.model)
    for k in (0, 5, 11):
        m = eng.model(eng.fit(k).psi)
        np.testing.assert_allclose(m.means[0], np.delete(Y, k, axis=0).mean(axis=0), atol=1e-10)


def test_identical_records_give_base_parameters():
    Y = np.tile([[1.0, 2.0]], (6, 1))
    Y = Y + np.array([[0.0, 0.0], [0.0, 0.1], [0.1, 0.0], [0.0, 0.0], [0.0, 0.1], [0.1, 0.0]])
    data = IncompleteDataset(np.vstack([Y, Y]))
    res = run_em(data, 1, EmConfig(seed=0))
    eng = ReplicateEngine(data, res.imputation, res.model)
    a, b = eng.fit(0).psi, eng.fit(6).psi
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_replicate_matches_weighted_likelihood_maximizer():
    rng = np.random.default_rng(3)
    Y = np.vstack([rng.normal([0, 0], 0.7, size=(5, 2)), rng.normal([3, 2], 0.7, size=(5, 2))])
    V = Y.copy()
    V[1, 1] = V[4, 1] = V[7, 0] = np.nan
    data = IncompleteDataset(V)
    res = run_em(data, 2, EmConfig(M=20000, seed=1, loglik_rel_tol=1e-8, max_iter=300))
    eng = ReplicateEngine(data, res.imputation, res.model)
    k = 2
    fit = eng.fit(k)
    assert fit.converged
    m = eng.model(fit.psi, canonical=True)
    w = jackknife_base_weights(10, k)

    def unpack(x):
        a = 1 / (1 + np.exp(-x[0]))
        chol = np.array([[np.exp(x[5]), 0.0], [x[6], np.exp(x[7])]])
        return np.array([a, 1 - a]), x[1:5].reshape(2, 2), chol @ chol.T

    def nll(x):
        alpha, mu, S = unpack(x)
        total = 0.0
        for i in np.flatnonzero(w):
            o = ~np.isnan(V[i])
            f = sum(alpha[g] * stats.multivariate_normal(mu[g, o], S[np.ix_(o, o)]).pdf(V[i, o])
                    for g in range(2))
            total += w[i] * np.log(f)
        return -total

    b = res.model
    L0 = np.linalg.cholesky(b.cov)
    x0 = np.r_[np.log(b.alpha[0] / b.alpha[1]), b.means.ravel(),
               np.log(L0[0, 0]), L0[1, 0], np.log(L0[1, 1])]
    alpha, mu, S = unpack(optimize.minimize(nll, x0, method="BFGS", options={"gtol": 1e-10}).x)
    assert np.abs(m.means - mu).max() < 1e-3
    assert np.abs(m.alpha - alpha).max() < 1e-3
    assert np.abs(m.cov - S).max() < 1e-3


def test_replicate_row_weights_normalize_per_record():
    rng = np.random.default_rng(4)
    data, _ = random_incomplete(rng, 30, 3, miss=0.3)
    res = run_em(data, 2, EmConfig(seed=2, M=10))
    eng = ReplicateEngine(data, res.imputation, res.model)
    for k in (0, 9):
        fit = eng.fit(k)
        sums = np.bincount(eng.rec, weights=fit.row_weights, minlength=data.n)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


# --- pipeline ----------------------------------------------------------------------
def test_pipeline_reproduces_textbook_mean_variance():
    rng = np.random.default_rng(5)
    Y = rng.normal(size=(15, 2))
    data = IncompleteDataset(Y)
    res = run_em(data, 1, EmConfig(seed=0))
    out = jackknife(data, res.imputation, res.model, [builtin_mean(0)])
    e = out.estimands[0]
    assert e.se ** 2 == pytest.approx(Y[:, 0].var(ddof=1) / 15, abs=1e-12)
    assert e.estimate == pytest.approx(Y[:, 0].mean(), abs=1e-14)
    assert out.failures == 0 and out.K == 15


def test_pipeline_on_incomplete_data():
    rng = np.random.default_rng(6)
    data, _ = random_incomplete(rng, 60, 3, miss=0.3)
    res = run_em(data, 2, EmConfig(seed=1, M=20))
    out = jackknife(data, res.imputation, res.model, [builtin_mean(1), builtin_proportion(2, 0.0)],
                    names=["m", "p"])
    for e in out.estimands:
        assert 0 < e.se < 1 and e.interval[0] < e.estimate < e.interval[1]
    assert out["m"].failures == 0
    grouped = jackknife(data, res.imputation, res.model, [builtin_mean(1)],
                        JackknifeConfig(groups=10))
    assert grouped.K == 10 and grouped.estimands[0].replicates.shape == (10, 1)


def test_linearized_replicates_agree_with_exact_fixed_points():
    from test_em import m1_like

    data, _ = m1_like(120, 4)
    res = run_em(data, 3, EmConfig(seed=3, M=50))
    Us = [builtin_mean(1), builtin_mean(2)]
    exact = jackknife(data, res.imputation, res.model, Us)
    # no fixed-point steps allowed: the center cannot converge, so replicates are linearized
    linear = jackknife(data, res.imputation, res.model, Us, JackknifeConfig(max_steps=0))
    assert not exact.linearized and linear.linearized
    assert linear.failures == 0
    for a, b in zip(exact.estimands, linear.estimands):
        assert b.se == pytest.approx(a.se, rel=0.05)
        assert b.estimate == a.estimate
