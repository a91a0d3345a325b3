import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_dataset
from longit.dataset import MONOTONE, COMPLETE, ALL_MISSING, load_armd_fixture, missingness_profile
from longit.prep import (NoCompletersError, complete_case, drop_all_missing, first_observed_only,
                         locf_fill, locf_impute, monotonize, observed_split)


def _nan_equal(a, b):
    np.testing.assert_array_equal(np.nan_to_num(a, nan=-1), np.nan_to_num(b, nan=-1))


def test_complete_case_on_fixture():
    assert complete_case(load_armd_fixture()).N == 188


def test_complete_case_identity_and_error():
    ds = make_dataset([[1, 0, 1], [0, 0, 0]])
    assert complete_case(ds).subjects == ds.subjects
    with pytest.raises(NoCompletersError):
        complete_case(make_dataset([[1, 0, None, None]]))


@pytest.mark.parametrize("raw,filled", [
    ([1, 0, None, None], [1, 0, 0, 0]),
    ([None, 1, None, 0], [None, 1, 1, 0]),
    ([0, 1, 1, 0], [0, 1, 1, 0]),
])
def test_locf_examples(raw, filled):
    _nan_equal(locf_fill(np.array([np.nan if v is None else v for v in raw], float)),
               np.array([np.nan if v is None else v for v in filled], float))


def test_locf_drops_all_missing_with_count():
    ds = make_dataset([[1, None], [None, None]])
    out, dropped = locf_impute(ds, return_dropped=True)
    assert dropped == 1 and out.N == 1


def test_observed_split_examples():
    ds = make_dataset([[1, 0, None, 1], [1, 1, 1, 1], [None, None, None, None]])
    o, m = observed_split(ds.subjects[0])
    assert list(o.indices) == [0, 1, 3] and list(m.indices) == [2]
    o, m = observed_split(ds.subjects[1])
    assert m.indices.size == 0
    o, m = observed_split(ds.subjects[2])
    assert o.indices.size == 0


def test_monotonize_examples():
    ds = make_dataset([[1, 1, None, 0], [None, 1, 0, 1], [1, 0, None, None]])
    out, discarded = monotonize(ds, return_discarded=True)
    Y = out.outcome_matrix()
    _nan_equal(Y[0], [1, 1, np.nan, np.nan])
    assert np.isnan(Y[1]).all()
    _nan_equal(Y[2], ds.outcome_matrix()[2])
    assert discarded == 1 + 3


def test_exclusion_helpers_on_fixture():
    ds = load_armd_fixture()
    kept, n_all = drop_all_missing(ds)
    assert n_all == 6 and kept.N == 234
    _, n_first = first_observed_only(kept)
    assert n_first == 3          # MOOO x2 and MOMM x1


def test_strategies_do_not_mutate_input():
    ds = load_armd_fixture()
    before = ds.outcome_matrix().copy()
    complete_case(ds), locf_impute(ds), monotonize(ds)
    _nan_equal(ds.outcome_matrix(), before)


profile = st.lists(st.sampled_from([0.0, 1.0, np.nan]), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(st.lists(profile, min_size=1, max_size=8).filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_monotonize_outputs_monotone_and_never_adds(rows):
    ds = make_dataset([[None if np.isnan(v) else v for v in r] for r in rows])
    out = monotonize(ds)
    for s in out.subjects:
        assert missingness_profile(s).pattern in (MONOTONE, COMPLETE, ALL_MISSING)
    assert out.observed_mask().sum() <= ds.observed_mask().sum()


@settings(max_examples=200, deadline=None)
@given(st.lists(profile, min_size=1, max_size=8).filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_locf_leaves_only_leading_gaps(rows):
    ds = make_dataset([[None if np.isnan(v) else v for v in r] for r in rows])
    out = locf_impute(ds)
    for s in out.subjects:
        miss = np.isnan(s.outcomes)
        if miss.any():
            first_obs = np.flatnonzero(~miss)[0]
            assert not miss[first_obs:].any()
