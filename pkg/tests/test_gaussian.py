import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from figmm.errors import DegenerateCovarianceError
from figmm.gaussian import (GaussianParams, ObservedPattern, conditional_params,
                            marginal_log_density, pattern_block, safe_cholesky,
                            sample_conditional)

from conftest import random_spd


def test_standard_normal_log_density_at_zero():
    params = GaussianParams([0.0], [[1.0]])
    assert params.logpdf(np.array([0.0])) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def test_bivariate_correlated_marginal_is_standard_normal():
    params = GaussianParams([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    lm = marginal_log_density([1.0], ObservedPattern([True, False]), params)
    assert lm == pytest.approx(stats.norm.logpdf(1.0), abs=1e-14)


def test_conditional_of_bivariate_normal():
    params = GaussianParams([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    cond = conditional_params([1.0], ObservedPattern([True, False]), params)
    assert cond.mean[0] == pytest.approx(0.5, abs=1e-15)
    assert cond.cov[0, 0] == pytest.approx(0.75, abs=1e-15)


def test_independent_coordinates_condition_to_marginal():
    params = GaussianParams([1.0, -2.0, 3.0], np.diag([1.0, 4.0, 9.0]))
    cond = conditional_params([5.0], ObservedPattern([True, False, False]), params)
    np.testing.assert_allclose(cond.mean, [-2.0, 3.0], atol=1e-15)
    np.testing.assert_allclose(cond.cov, np.diag([4.0, 9.0]), atol=1e-15)


def test_logpdf_matches_scipy_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = int(rng.integers(1, 6))
        mean, cov = rng.normal(size=p), random_spd(rng, p)
        x = rng.normal(size=(7, p))
        ref = stats.multivariate_normal(mean, cov).logpdf(x)
        np.testing.assert_allclose(GaussianParams(mean, cov).logpdf(x), ref, rtol=1e-12)


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        GaussianParams([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])


def test_singular_covariance_raises_degenerate():
    with pytest.raises(DegenerateCovarianceError) as err:
        GaussianParams([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0 - 1e-3]], component=2)
    assert err.value.component == 2


def test_safe_cholesky_ridge_rescues_semidefinite():
    # rank-deficient but PSD: one ridge of 1e-8 trace/p makes it factorable
    L = safe_cholesky(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.all(np.isfinite(L))


def test_conditioning_requires_partial_observation():
    params = GaussianParams([0.0, 0.0], np.eye(2))
    with pytest.raises(ValueError):
        conditional_params([], ObservedPattern([False, False]), params)
    with pytest.raises(ValueError):
        conditional_params([1.0, 2.0], ObservedPattern([True, True]), params)
    with pytest.raises(ValueError):
        marginal_log_density([], ObservedPattern([False, False]), params)


def test_pattern_is_hashable_and_read_only():
    a = ObservedPattern([True, False, True])
    b = ObservedPattern.from_values([1.0, np.nan, 2.0])
    assert a == b and hash(a) == hash(b)
    assert a.obs_count == 2 and list(a.missing) == [1]
    with pytest.raises(ValueError):
        a.mask[0] = False


def test_sample_conditional_moments():
    rng = np.random.default_rng(1)
    cond = GaussianParams([1.0, -1.0], [[2.0, 0.3], [0.3, 0.5]])
    draws = sample_conditional(cond, 200000, rng)
    np.testing.assert_allclose(draws.mean(axis=0), cond.mean, atol=0.01)
    np.testing.assert_allclose(np.cov(draws.T), cond.cov, atol=0.02)
    with pytest.raises(ValueError):
        sample_conditional(cond, 0, rng)


@st.composite
def instances(draw):
    p = draw(st.integers(2, 5))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    mask = draw(st.lists(st.booleans(), min_size=p, max_size=p).filter(lambda m: 0 < sum(m) < p))
    return p, np.random.default_rng(seed), np.array(mask)


@settings(max_examples=60, deadline=None)
@given(instances())
def test_chain_rule_joint_equals_marginal_times_conditional(inst):
    p, rng, mask = inst
    mean, cov = rng.normal(size=p), random_spd(rng, p)
    params = GaussianParams(mean, cov)
    x = rng.normal(size=p)
    pat = ObservedPattern(mask)
    cond = conditional_params(x[pat.observed], pat, params)
    lhs = params.logpdf(x)
    rhs = marginal_log_density(x[pat.observed], pat, params) + cond.logpdf(x[pat.missing])
    assert lhs == pytest.approx(rhs, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(instances())
def test_pattern_block_matches_conditional_params(inst):
    p, rng, mask = inst
    mean, cov = rng.normal(size=p), random_spd(rng, p)
    x = rng.normal(size=p)
    pat = ObservedPattern(mask)
    blk = pattern_block(cov, mask)
    cond = conditional_params(x[pat.observed], pat, GaussianParams(mean, cov))
    shift = mean[blk.missing] + blk.coef @ (x[blk.observed] - mean[blk.observed])
    np.testing.assert_allclose(shift, cond.mean, atol=1e-10)
    np.testing.assert_allclose(blk.chol_cond @ blk.chol_cond.T, cond.cov, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(instances())
def test_conditional_covariance_is_spd_and_no_larger(inst):
    p, rng, mask = inst
    cov = random_spd(rng, p)
    pat = ObservedPattern(mask)
    cond = conditional_params(rng.normal(size=pat.obs_count), pat, GaussianParams(np.zeros(p), cov))
    assert np.all(np.linalg.eigvalsh(cond.cov) > 0)
    gap = cov[np.ix_(pat.missing, pat.missing)] - cond.cov
    assert np.all(np.linalg.eigvalsh(gap) > -1e-10)
