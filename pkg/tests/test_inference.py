import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from helpers import make_dataset
from longit.dataset import DataError, load_armd_fixture
from longit.design import build_design
from longit.gee import fit_gee
from longit.inference import (AVERAGE_BOTH_ARMS, AVERAGE_PER_ARM, JOINT_BOTH_ARMS,
                              JOINT_PER_ARM, LAST_OCCASION, build_contrasts, contrast_test,
                              endpoint_analysis, endpoint_table, enumerate_tables, fisher_exact,
                              pearson_chi2, wald_test)
from longit.sim import SimSpec, simulate


def test_wald_single_row():
    r = wald_test([1, -1], [2.0, 0.5], np.diag([0.25, 0.5]))
    assert r.statistic == pytest.approx(1.5 ** 2 / 0.75)
    assert r.df == 1 and r.estimate == pytest.approx(1.5) and r.se == pytest.approx(math.sqrt(0.75))
    assert r.p_value == pytest.approx(math.erfc(math.sqrt(r.statistic / 2)), rel=1e-12)


def test_wald_joint_and_singular():
    beta = np.array([1.0, 2.0, 3.0])
    V = np.diag([1.0, 4.0, 9.0])
    r = wald_test(np.eye(3), beta, V)
    assert r.statistic == pytest.approx(3.0) and r.df == 3
    with pytest.raises(np.linalg.LinAlgError):
        wald_test([[1, 0, 0], [2, 0, 0]], beta, V)
    with pytest.raises(ValueError):
        wald_test([1, 0], beta, V)


def test_wald_invariant_to_row_reparameterization():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    V = A @ A.T + np.eye(4)
    beta = rng.normal(size=4)
    L = rng.normal(size=(2, 4))
    T = np.array([[2.0, 1.0], [0.5, -1.0]])
    assert wald_test(T @ L, beta, V).statistic == pytest.approx(wald_test(L, beta, V).statistic,
                                                                rel=1e-10)


@pytest.fixture(scope="module")
def three_arm_design():
    rng = np.random.default_rng(0)
    rows = rng.integers(0, 2, size=(90, 8)).tolist()
    arms = ["A", "B", "C"] * 30
    return build_design(make_dataset(rows, arms=arms, occasions=[str(k) for k in range(1, 9)]),
                        "y ~ 0 + visit + visit:trt")


@pytest.mark.parametrize("kind,shape", [
    (JOINT_PER_ARM, (8, 24)), (JOINT_BOTH_ARMS, (16, 24)),
    (AVERAGE_PER_ARM, (1, 24)), (AVERAGE_BOTH_ARMS, (2, 24)), (LAST_OCCASION, (2, 24)),
])
def test_contrast_shapes(three_arm_design, kind, shape):
    assert build_contrasts(three_arm_design, kind).shape == shape


def test_contrasts_pick_effect_columns(three_arm_design):
    cols = three_arm_design.columns
    L = build_contrasts(three_arm_design, JOINT_PER_ARM, arm="C")
    for k, row in enumerate(L):
        assert cols[int(np.flatnonzero(row)[0])] == f"visit[{k + 1}]:trt[C]"
    avg = build_contrasts(three_arm_design, AVERAGE_PER_ARM, arm="B")[0]
    assert np.allclose(avg[np.abs(avg) > 0], 1 / 8)


def test_contrasts_invariant_to_coding():
    ds = simulate(SimSpec(N=300, intercepts=(-1, -0.5, 0, 0.5), effects=((0.5, 0.75, 1, 1.25),),
                          sigma=1.0, seed=3, dropout=False))
    a = fit_gee(ds, "y ~ 0 + visit + visit:trt", "exch")
    b = fit_gee(ds, "y ~ trt*visit", "exch")
    for kind in (JOINT_PER_ARM, AVERAGE_PER_ARM, LAST_OCCASION):
        ra, rb = contrast_test(a, kind), contrast_test(b, kind)
        assert ra.statistic == pytest.approx(rb.statistic, rel=1e-6)


def test_contrast_needs_interaction_terms():
    ds = make_dataset([[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 1]], arms=["0", "1", "0", "1"])
    d = build_design(ds, "y ~ visit + trt")
    build_contrasts(d, LAST_OCCASION)
    with pytest.raises(DataError, match="lacks"):
        build_contrasts(d, JOINT_PER_ARM)
    with pytest.raises(DataError, match="lacks"):
        build_contrasts(build_design(ds, "y ~ visit"), LAST_OCCASION)


def test_pearson_examples():
    r = pearson_chi2([[10, 20], [30, 40]])
    E = np.outer([30, 70], [40, 60]) / 100
    assert r.statistic == pytest.approx(np.sum((np.array([[10, 20], [30, 40]]) - E) ** 2 / E))
    assert r.df == 1
    assert pearson_chi2([[1, 2, 3], [4, 5, 6]]).df == 2
    with pytest.raises(ValueError):
        pearson_chi2([[0, 0], [3, 4]])


def _fraction_fisher(table):
    (a, b), (c, d) = table
    r1, c1, n = a + b, a + c, a + b + c + d
    def prob(x):
        return Fraction(math.comb(c1, x) * math.comb(n - c1, r1 - x), math.comb(n, r1))
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    p0 = prob(a)
    return float(sum(prob(x) for x in range(lo, hi + 1) if prob(x) <= p0))


def test_fisher_small_examples():
    assert fisher_exact([[3, 1], [1, 3]]) == pytest.approx(0.48571428571428527, abs=1e-12)
    assert fisher_exact([[0, 5], [5, 0]]) == pytest.approx(2 / 252, abs=1e-15)
    with pytest.raises(ValueError):
        fisher_exact([[300, 1], [1, 300]])


def test_fisher_2xk_against_fraction_enumeration():
    t = np.array([[2, 0, 3], [1, 4, 1]])
    cols = t.sum(axis=0)
    r1 = t[0].sum()
    def weight(x):
        return math.prod(math.comb(int(c), int(v)) for c, v in zip(cols, x))
    total = math.comb(int(cols.sum()), int(r1))
    w0 = weight(t[0])
    p = sum(Fraction(weight(x), total) for x in itertools.product(*(range(c + 1) for c in cols))
            if sum(x) == r1 and weight(x) <= w0)
    assert fisher_exact(t) == pytest.approx(float(p), abs=1e-14)


def test_enumeration_probabilities_sum_to_one():
    first, lp = enumerate_tables([7, 9], [3, 4, 5, 4])
    assert np.all(first.sum(axis=1) == 7)
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-13)
    assert len({tuple(r) for r in first}) == len(first)


def test_endpoint_on_fixture():
    ds = load_armd_fixture()
    t_cc, _, n_cc = endpoint_table(ds, "last-planned", "cc")
    assert n_cc == 188 and t_cc.sum() == 188
    t_lo, _, n_lo = endpoint_table(ds, "last-planned", "locf")
    t_obs, _, _ = endpoint_table(ds, "last-observed", "locf")
    np.testing.assert_array_equal(t_lo, t_obs)
    assert n_lo == 234
    with pytest.raises(ValueError):
        endpoint_table(ds, "last-observed", "cc")
    res = endpoint_analysis(ds)
    assert 0 <= res.fisher_p <= 1 and res.pearson.df == 1
