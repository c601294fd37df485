import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats as sps

from mdtlab.stats import betainc_reg, paired_ttest, pearson, t_sf, t_sf_two_sided

from oracles import TTEST_A, TTEST_B, TTEST_P, TTEST_T


def test_paired_ttest_frozen():
    res = paired_ttest(TTEST_A, TTEST_B)
    assert res.t == pytest.approx(TTEST_T, rel=1e-12)
    assert res.p == pytest.approx(TTEST_P, rel=1e-9)
    assert res.df == 7
    assert res.p_greater() == pytest.approx(TTEST_P / 2, rel=1e-9)


def test_paired_ttest_antisymmetric():
    a, b = paired_ttest(TTEST_A, TTEST_B), paired_ttest(TTEST_B, TTEST_A)
    assert a.t == -b.t and a.p == b.p and a.mean_diff == -b.mean_diff
    assert a.p_greater() + b.p_greater() == pytest.approx(1.0)


def test_paired_ttest_undefined_and_errors():
    res = paired_ttest([1, 2, 3], [0, 1, 2])
    assert math.isnan(res.t) and math.isnan(res.p) and not res.defined and res.mean_diff == 1
    assert math.isnan(res.p_greater())
    with pytest.raises(ValueError):
        paired_ttest([1], [2])
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [1, 2, 3])


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30))
def test_paired_ttest_matches_scipy(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    d = a - b
    if d.std() < 1e-6 * (1 + np.abs(d).max()):
        return
    ours = paired_ttest(a, b)
    ref = sps.ttest_rel(a, b)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-8, abs=1e-10)
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert betainc_reg(a, b, x) == pytest.approx(float(special.betainc(a, b, x)), rel=1e-9, abs=1e-12)


@given(st.floats(-30, 30), st.integers(1, 200))
def test_t_tails_match_scipy(t, df):
    assert t_sf(t, df) == pytest.approx(float(sps.t.sf(t, df)), rel=1e-8, abs=1e-14)
    assert t_sf_two_sided(t, df) == pytest.approx(float(2 * sps.t.sf(abs(t), df)), rel=1e-8, abs=1e-14)


def test_pearson_matches_scipy(rng):
    x = rng.normal(size=25)
    y = 0.4 * x + rng.normal(size=25)
    r, p = pearson(x, y)
    ref = sps.pearsonr(x, y)
    assert r == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-8)


def test_pearson_degenerate():
    assert all(math.isnan(v) for v in pearson([1, 2], [3, 4]))
    assert all(math.isnan(v) for v in pearson([1, 1, 1], [1, 2, 3]))
    assert pearson([1, 2, 3], [2, 4, 6]) == (1.0, 0.0)
