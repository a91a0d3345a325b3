import warnings

import numpy as np
import pytest

from helpers import loop_score, make_dataset
from longit.design import build_design
from longit.gee import (ConvergenceError, WorkingCorrelation, correlation_matrix,
                        estimate_alpha, fit_gee, gee_contributions)
from longit.glm import fit_logistic
from longit.sim import SimSpec, simulate, simulate_complete

SAT = "y ~ 0 + visit + visit:trt"


def _residual_grid(seed=0, N=30, n=4, p_miss=0.3):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(N, n))
    mask = rng.random((N, n)) > p_miss
    return e, mask


def test_exchangeable_alpha_matches_pair_loop():
    e, mask = _residual_grid()
    per_subject = []
    for i in range(len(e)):
        obs = np.flatnonzero(mask[i])
        if len(obs) < 2:
            continue
        prods = [e[i, j] * e[i, k] for j in obs for k in obs if j != k]
        per_subject.append(np.mean(prods))
    assert estimate_alpha(e, "exch", mask) == pytest.approx(np.mean(per_subject), abs=1e-14)


def test_ar1_and_unstructured_alpha_match_loops():
    e, mask = _residual_grid(seed=1)
    pairs = [e[i, j] * e[i, j + 1] for i in range(len(e)) for j in range(3)
             if mask[i, j] and mask[i, j + 1]]
    assert estimate_alpha(e, "ar1", mask) == pytest.approx(np.mean(pairs), abs=1e-14)
    R = estimate_alpha(e, "un", mask)
    for j in range(4):
        for k in range(4):
            if j != k:
                both = mask[:, j] & mask[:, k]
                assert R[j, k] == pytest.approx(np.mean(e[both, j] * e[both, k]), abs=1e-14)


def test_unstructured_cell_without_support_warns():
    e = np.ones((2, 3))
    mask = np.array([[1, 1, 0], [0, 1, 1]], bool)
    with pytest.warns(RuntimeWarning, match="without support"):
        R = estimate_alpha(e, "un", mask)
    assert R[0, 2] == 0.0


def test_ar1_uses_design_lag():
    C = correlation_matrix("ar1", 0.5, [0, 2, 3])
    np.testing.assert_allclose(C, [[1, 0.25, 0.125], [0.25, 1, 0.5], [0.125, 0.5, 1]])
    with pytest.raises(ValueError):
        correlation_matrix("exch", -0.5, [0, 1, 2, 3], n=4)


def test_independence_complete_equals_logistic():
    ds = simulate_complete(SimSpec(N=200, intercepts=(-0.5, 0, 0.3, 0.6),
                                   effects=((0.2, 0.4, 0.6, 0.8),), sigma=1.0, seed=4))
    d = build_design(ds, SAT)
    g = fit_gee(d, structure="ind")
    X, y = d.stacked()
    f = fit_logistic(X, y)
    np.testing.assert_allclose(g.beta, f.beta, atol=1e-8)
    np.testing.assert_allclose(g.model_based_cov, f.covariance, atol=1e-8)


@pytest.mark.parametrize("structure", ["ind", "exch", "ar1", "un"])
def test_score_vanishes_on_independent_assembly(small_mar, structure):
    fit = fit_gee(small_mar, SAT, structure)
    d = fit.design
    S, I0, _ = loop_score(fit.beta, d.X, d.y, d.mask, fit.correlation.matrix)
    assert np.max(np.abs(S)) < 1e-6
    np.testing.assert_allclose(I0, fit.I0, rtol=1e-10, atol=1e-10)


def test_permuting_subjects_changes_nothing(small_mar):
    a = fit_gee(small_mar, SAT, "exch")
    perm = np.random.default_rng(0).permutation(small_mar.N)
    shuffled = small_mar.with_subjects([small_mar.subjects[i] for i in perm])
    b = fit_gee(shuffled, SAT, "exch")
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-10)
    np.testing.assert_allclose(a.sandwich_cov, b.sandwich_cov, atol=1e-10)
    assert a.alpha_hat == pytest.approx(b.alpha_hat, abs=1e-12)


def test_constant_weight_scaling_leaves_estimates_unchanged(small_mar):
    a = fit_gee(small_mar, SAT, "exch")
    b = fit_gee(small_mar, SAT, "exch", weights=np.full(small_mar.N, 3.0))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-10)
    assert a.alpha_hat == pytest.approx(b.alpha_hat, abs=1e-12)


def test_integer_subject_weight_equals_duplication():
    ds = simulate(SimSpec(N=60, intercepts=(-0.5, 0, 0.3, 0.6), effects=((0.2, 0.4, 0.6, 0.8),),
                          sigma=1.0, psi_intercept=-2, seed=9))
    w = np.ones(ds.N)
    w[:10] = 2.0
    a = fit_gee(ds, SAT, "exch", weights=w)
    extra = [s.__class__(s.id + "b", s.outcomes, s.covariates, s.treatment) for s in ds.subjects[:10]]
    b = fit_gee(ds.with_subjects(list(ds.subjects) + extra), SAT, "exch")
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-9)
    np.testing.assert_allclose(a.model_based_cov, b.model_based_cov, atol=1e-9)


def test_single_subject():
    ds = make_dataset([[1, 0, 1, 1]])
    fit = fit_gee(ds, "y ~ 1", "ind")
    assert fit.beta[0] == pytest.approx(np.log(3), abs=1e-8)
    assert fit.n_subjects == 1
    with pytest.raises(ValueError):
        fit_gee(ds, "y ~ 1", "ind", small_sample=True)
    # residuals sum to zero, which pins the exchangeable moment estimate at -1/(n-1)
    with pytest.raises(ValueError, match="outside"):
        fit_gee(ds, "y ~ 1", "exch")


def test_small_sample_factor(small_mar):
    a = fit_gee(small_mar, SAT, "exch")
    b = fit_gee(small_mar, SAT, "exch", small_sample=True)
    N = a.n_subjects
    np.testing.assert_allclose(b.sandwich_cov, a.sandwich_cov * N / (N - 1), rtol=1e-12)


def test_iteration_cap_raises(small_mar):
    with pytest.raises(ConvergenceError):
        fit_gee(small_mar, SAT, "exch", max_iter=1)


def test_recovers_marginal_truth_on_complete_data():
    spec = SimSpec(N=3000, intercepts=(-1, -0.5, 0, 0.5), effects=((0.5, 0.75, 1, 1.25),),
                   sigma=1.5, seed=21)
    fit = fit_gee(simulate_complete(spec), SAT, "exch")
    truth = spec.marginal_beta()
    z = [(b - truth[c]) / s for c, b, s in zip(fit.columns, fit.beta, fit.se_robust)]
    assert np.max(np.abs(z)) < 3.5
    assert 0.2 < fit.alpha_hat < 0.5


def test_contributions_are_per_subject(small_mar):
    fit = fit_gee(small_mar, SAT, "ar1")
    S, I0, g = gee_contributions(fit.beta, fit.design, fit.correlation)
    np.testing.assert_allclose(g.sum(axis=0), S, atol=1e-12)
    np.testing.assert_allclose(g.T @ g, fit.I1, rtol=1e-10)


def test_pearson_residual_and_correlation_examples():
    from longit.gee import pearson_residuals
    np.testing.assert_allclose(pearson_residuals([1, 0, 1], [0.5, 0.5, 0.8]), [1.0, -1.0, 0.5])
    np.testing.assert_allclose(correlation_matrix("ar1", 0.5, [0, 1, 2]),
                               [[1, 0.5, 0.25], [0.5, 1, 0.5], [0.25, 0.5, 1]])
    np.testing.assert_allclose(correlation_matrix("exch", 0.3, [0, 1], n=4), [[1, 0.3], [0.3, 1]])
    np.testing.assert_array_equal(correlation_matrix("ind", None, [0, 2]), np.eye(2))
    with pytest.raises(FloatingPointError):
        pearson_residuals([1.0], [1.0])
