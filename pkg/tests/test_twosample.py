import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special

from kdepth.core import Ensemble, unit_grid
from kdepth.fieldsim import matern_spec, sample_fields
from kdepth.twosample import (
    by_fdr_adjust,
    k_pn_distance,
    kd_statistic,
    kd_test,
    kolmogorov_cdf,
    kolmogorov_quantile,
    kolmogorov_sf,
    qi_test,
)

from conftest import constant_ensemble


# --- statistic ---------------------------------------------------------------


def test_kd_identical_is_zero(pair):
    X, _ = pair
    assert kd_statistic(X, X) == 0.0
    assert k_pn_distance(X, X) == 0.0
    res = kd_test(X, X)
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_k_pn_hand_enumeration():
    # X = {0, 2}, Y = {1} as constant fields.  Weak-inequality CDF relative to X:
    # x=0 -> P=1/2, depth 1; x=2 -> P=1, depth 0; y=1 -> P=1/2, depth 1.
    # F over X's depths {1, 0}: (1, 1/2); G: (1, 0) -> K_Pn = 1/2.
    g = unit_grid(3, 3)
    X = constant_ensemble([0.0, 2.0], g)
    # a one-member Y is not a valid Ensemble; two copies have the same empirical law
    Y = constant_ensemble([1.0, 1.0], g)
    assert k_pn_distance(X, Y) == 0.5


def test_least_deep_member_has_cdf_one_over_n(pair):
    from kdepth.depth import depth_profile

    X, _ = pair
    d = depth_profile(X, X).values
    k = np.argmin(d)
    assert np.count_nonzero(d <= d[k]) / X.size == pytest.approx(1 / X.size)


ens_st = arrays(np.float64, (11, 4), elements=st.integers(-400, 400).map(lambda k: k / 8.0))


@settings(max_examples=40, deadline=None)
@given(members=ens_st, split=st.integers(2, 9))
def test_kd_symmetric_bounded_and_invariant(members, split):
    g = unit_grid(2, 2)
    X, Y = Ensemble(g, members[:split]), Ensemble(g, members[split:])
    kd = kd_statistic(X, Y)
    assert 0.0 <= kd <= 1.0
    assert kd == kd_statistic(Y, X)
    f = lambda a: np.where(a > 0, 4.0 * a, 0.5 * a) - 3.0  # exact in float64
    assert kd_statistic(Ensemble(g, f(X.members)), Ensemble(g, f(Y.members))) == kd


def test_pooled_path_matches_reference_path(pair):
    X, Y = pair
    res = kd_test(X, Y)
    assert res.k_pn == k_pn_distance(X, Y)
    assert res.k_qm == k_pn_distance(Y, X)
    assert res.statistic == max(res.k_pn, res.k_qm)


def test_nested_sample_detected():
    # X concentrated inside Y: only the Y-referenced half sees it
    g = unit_grid(6, 6)
    rng = np.random.default_rng(2)
    spec = matern_spec(g, 0.4, 1.0)
    X = sample_fields(spec, 100, rng)
    Y = sample_fields(matern_spec(g, 0.4, 1.0, sigma=10.0), 100, rng)
    res = kd_test(X, Y)
    assert res.k_qm >= 0.9
    assert res.p_value < 1e-6


# --- Kolmogorov law ----------------------------------------------------------


def test_kolmogorov_cdf_values():
    assert kolmogorov_cdf(0.0) == 0.0
    assert kolmogorov_cdf(1.358) == pytest.approx(0.95, abs=5e-4)
    assert kolmogorov_cdf(3.0) > 0.99999
    for level, crit in [(0.90, 1.224), (0.95, 1.358), (0.99, 1.628)]:
        assert kolmogorov_quantile(level) == pytest.approx(crit, abs=1e-3)


def test_kolmogorov_matches_scipy_and_is_monotone():
    t = np.linspace(0.05, 3.5, 400)
    np.testing.assert_allclose(kolmogorov_cdf(t), 1 - special.kolmogorov(t), atol=1e-11)
    assert np.all(np.diff(kolmogorov_cdf(t)) >= 0)
    assert np.all(kolmogorov_cdf(t) < 1)
    big = np.array([4.0, 6.0, 10.0])
    np.testing.assert_allclose(kolmogorov_sf(big), special.kolmogorov(big), rtol=1e-12)


# --- tests and p-values ------------------------------------------------------


def test_permutation_contract(pair):
    X, Y = pair
    with pytest.raises(ValueError, match="permutations >= 99"):
        kd_test(X, Y, "permutation", permutations=98)
    a = kd_test(X, Y, "permutation", permutations=99, seed=5)
    b = kd_test(X, Y, "permutation", permutations=99, seed=5)
    assert a.p_value == b.p_value
    assert 1 / 100 <= a.p_value <= 1
    assert a.null.values.size == 99


def test_permutation_agrees_with_asymptotic_smooth():
    g = unit_grid(8, 8)
    spec = matern_spec(g, 0.5, 1.5)
    diffs = []
    for s in range(20):
        rng = np.random.default_rng(100 + s)
        X, Y = sample_fields(spec, 75, rng), sample_fields(spec, 75, rng)
        pa = kd_test(X, Y, "asymptotic").p_value
        pp = kd_test(X, Y, "permutation", permutations=499, seed=s).p_value
        diffs.append(abs(pa - pp))
    # the lattice of KD values makes single pairs noisy; the typical gap is small
    assert np.median(diffs) < 0.05


def test_qi_identical_samples():
    # with distinct depths the mean relative rank of X within itself is (n+1)/(2n)
    from kdepth.depth import depth_profile

    from kdepth.core import Grid

    rng = np.random.default_rng(0)
    w = rng.uniform(0.5, 1.5, 100)  # generic weights break lattice ties
    g = Grid((100,), (np.arange(100.0),), weights=w / w.sum(), weight_mode="custom")
    X = Ensemble(g, rng.normal(size=(21, 100)))
    assert np.unique(depth_profile(X, X).values).size == X.size
    res = qi_test(X, X)
    assert res.statistic == pytest.approx((X.size + 1) / (2 * X.size), abs=1e-15)
    assert abs(res.statistic - 0.5) <= 1 / (2 * X.size) + 1e-12
    assert res.method == "qi_normal"


def test_qi_sidedness():
    g = unit_grid(5, 5)
    rng = np.random.default_rng(4)
    X = sample_fields(matern_spec(g, 0.4, 1.0), 100, rng)
    Y = sample_fields(matern_spec(g, 0.4, 1.0, sigma=0.25), 50, rng)
    lower = qi_test(X, Y, "lower")
    two = qi_test(X, Y, "two")
    assert lower.statistic > 0.5 and lower.p_value > 0.5
    assert two.p_value < 0.01


def test_by_fdr_hand_oracle():
    out = by_fdr_adjust([0.04, 0.01, 0.02])
    np.testing.assert_allclose(out, [0.07333333333333333, 0.055, 0.055], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(by_fdr_adjust([1.0, 1.0, 1.0]), [1.0, 1.0, 1.0])
    assert by_fdr_adjust([0.3])[0] == 0.3


@settings(max_examples=50, deadline=None)
@given(p=arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)), seed=st.integers(0, 999))
def test_by_fdr_properties(p, seed):
    adj = by_fdr_adjust(p)
    assert np.all(adj >= p) and np.all(adj <= 1)
    perm = np.random.default_rng(seed).permutation(p.size)
    np.testing.assert_array_equal(by_fdr_adjust(p[perm]), adj[perm])
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
