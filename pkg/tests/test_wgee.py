import warnings

import numpy as np
import pytest

from helpers import loop_score, make_dataset
from longit.dataset import DataError, load_armd_fixture
from longit.gee import fit_gee
from longit.glm import SeparationError
from longit.sim import SimSpec, simulate
from longit.wgee import (_weights_from_hazards, dropout_time_distribution, fit_dropout_model,
                         fit_wgee, occasion_weights, person_period_expand, subject_weights)

SAT = "y ~ 0 + visit + visit:trt"
HAZ = np.array([[np.nan, 0.1, 0.2, 0.3]])


def test_person_period_expansion_example():
    ds = make_dataset([[1, 0, 1, 1], [1, 1, None, None], [0, None, None, None]],
                      arms=["0", "1", "0"])
    pp = person_period_expand(ds)
    assert pp.columns == ("intercept", "prev", "trt[1]", "time[2]", "time[3]")
    np.testing.assert_array_equal(pp.subject, [0, 0, 0, 1, 1, 2])
    np.testing.assert_array_equal(pp.occasion, [1, 2, 3, 1, 2, 1])
    np.testing.assert_array_equal(pp.drop, [0, 0, 0, 0, 1, 1])
    np.testing.assert_array_equal(pp.X[:, 1], [1, 0, 1, 1, 1, 0])
    np.testing.assert_array_equal(pp.X[:, 2], [0, 0, 0, 1, 1, 0])
    np.testing.assert_array_equal(pp.X[:, 3:], [[1, 0], [0, 1], [0, 0], [1, 0], [0, 1], [1, 0]])


def test_expansion_rejects_unprepared_profiles():
    with pytest.raises(DataError, match="intermittent"):
        person_period_expand(make_dataset([[1, None, 1, 1], [1, 1, 1, 1]]))
    with pytest.raises(DataError, match="occasion 1"):
        person_period_expand(make_dataset([[None] * 4, [1, 1, 1, 1]]))


@pytest.mark.parametrize("d,cum,nu", [
    (5, [1, 0.9, 0.72, 0.504], 0.504),
    (4, [1, 0.9, 0.72 * 0.3, np.nan], 0.72 * 0.3),
    (3, [1, 0.9 * 0.2, np.nan, np.nan], 0.18),
    (2, [0.1, np.nan, np.nan, np.nan], 0.1),
])
def test_cumulative_weight_examples(d, cum, nu):
    occ = _weights_from_hazards(HAZ, np.array([d]), 4, "occasion")
    sub = _weights_from_hazards(HAZ, np.array([d]), 4, "subject")
    np.testing.assert_allclose(occ.cumulative[0], cum, atol=1e-15)
    np.testing.assert_allclose(occ.values[0], 1 / np.array(cum), atol=1e-12)
    assert occ.nu[0] == pytest.approx(nu, abs=1e-15)
    observed = ~np.isnan(np.array(cum, float))
    np.testing.assert_allclose(sub.values[0][observed], 1 / nu, rtol=1e-14)
    assert np.isnan(sub.values[0][~observed]).all()


def test_subject_probability_is_dropout_distribution_entry():
    dist = dropout_time_distribution(HAZ[0, 1:])
    assert dist.sum() == pytest.approx(1.0, abs=1e-15)
    for d in range(2, 6):
        ws = _weights_from_hazards(HAZ, np.array([d]), 4, "subject")
        assert ws.nu[0] == pytest.approx(dist[d - 2], abs=1e-15)


def test_fixture_exclusions_and_extreme_weight_warning():
    ds = load_armd_fixture()
    with pytest.warns(RuntimeWarning, match="extreme"):
        fit = fit_wgee(ds, SAT, "exch", dropout_covariates=("lesion",),
                       dropout_references={"lesion": "4"})
    assert fit.excluded == {"all_missing": 6, "first_missing": 3, "discarded_observations": 12}
    assert len(fit.dropout.columns) == 8
    assert fit.n_subjects == 231


def test_truncation_caps_weights():
    ds = load_armd_fixture()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit = fit_wgee(ds, SAT, "exch", truncate=0.95, dropout_covariates=("lesion",))
    assert fit.converged


@pytest.mark.parametrize("mode", ["occasion", "subject"])
@pytest.mark.parametrize("structure", ["ind", "exch", "ar1"])
def test_weighted_score_vanishes(small_mar, mode, structure):
    fit = fit_wgee(small_mar, SAT, structure, mode=mode)
    d = fit.design
    W = np.where(d.mask, fit.weight_set.values, 1.0)
    S, _, _ = loop_score(fit.beta, d.X, d.y, d.mask, fit.correlation.matrix, W)
    assert np.max(np.abs(S)) < 1e-6


def test_modes_agree_only_where_completers_alone_contribute(small_mar):
    a = fit_wgee(small_mar, SAT, "ind", mode="occasion")
    b = fit_wgee(small_mar, SAT, "ind", mode="subject")
    # saturated mean under independence: each occasion is a separate weighted
    # fit, and at the last occasion both modes weight completers by 1 / nu
    last = [k for k, c in enumerate(a.columns) if c.startswith("visit[4]")]
    early = [k for k in range(len(a.columns)) if k not in last]
    np.testing.assert_allclose(a.beta[last], b.beta[last], atol=1e-8)
    assert np.max(np.abs(a.beta[early] - b.beta[early])) > 1e-3


def test_unit_weights_give_plain_gee(small_mar):
    a = fit_gee(small_mar, SAT, "exch")
    b = fit_gee(small_mar, SAT, "exch", weights=np.ones((small_mar.N, small_mar.n)))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)
    np.testing.assert_allclose(a.sandwich_cov, b.sandwich_cov, atol=1e-12)


def test_identities_on_simulated_subjects(small_mar):
    data = small_mar.with_subjects([s for s in small_mar.subjects if s.observed[0]])
    model = fit_dropout_model(person_period_expand(data))
    occ = occasion_weights(model, data)
    sub = subject_weights(model, data)
    last = np.array([np.flatnonzero(s.observed)[-1] for s in data.subjects])
    np.testing.assert_allclose(occ.cumulative[np.arange(data.N), last], sub.nu, atol=1e-12)


def test_dropout_model_recovers_mechanism():
    spec = SimSpec(N=6000, intercepts=(-0.5, 0, 0.3, 0.6), effects=((0.2, 0.4, 0.6, 0.8),),
                   sigma=1.0, psi_intercept=-2.0, psi_prev=1.0, psi_trt=(0.4,),
                   psi_time=(0.3, -0.2), seed=5)
    model = fit_dropout_model(person_period_expand(simulate(spec)))
    # time dummies are relative to the last occasion, which carries no shift
    truth = np.array([-2.0, 1.0, 0.4, 0.3, -0.2])
    assert np.all(np.abs(model.psi - truth) < 4 * model.se)


def test_no_dropout_is_not_estimable():
    ds = make_dataset([[1, 0, 1], [0, 1, 1], [1, 1, 0]])
    with pytest.raises(SeparationError):
        fit_dropout_model(person_period_expand(ds))


def test_uniform_hazards_give_uniform_weights():
    P = np.array([[np.nan, 0.5], [np.nan, 0.5]])
    ws = _weights_from_hazards(P, np.array([2, 3]), 2, "subject")
    np.testing.assert_allclose(ws.nu, [0.5, 0.5])
    np.testing.assert_allclose(ws.values[~np.isnan(ws.values)], 2.0)
