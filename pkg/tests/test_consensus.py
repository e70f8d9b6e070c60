import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from consensusjm.consensus import (WeightTable, combine, combine_union, combine_weighted, equal_weights,
                                   gaussian_product_oracle, precision_weights, stack_draws)
from consensusjm.model import ParamLayout
from consensusjm.sampler import ChainDraws
from oracles import consensus_mean_se


def _grid(S, K, D, P, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    arr = rng.normal(size=(S, K, D, P))
    if scale is not None:
        arr *= np.asarray(scale)[:, None, None, None]
    return arr


def _chain(draws, names, s=0, k=0):
    return ChainDraws(names=tuple(names), draws=np.asarray(draws, float), subsample=s, chain=k)


# union --------------------------------------------------------------------
def test_union_concatenates():
    arr = np.array([[[[1.0], [2.0]]], [[[3.0], [4.0]]]])  # S=2, K=1, D=2, P=1
    out = combine_union(arr)
    assert out.chains[0][:, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_union_single_subsample_is_identity():
    arr = _grid(1, 3, 20, 4)
    out = combine_union(arr)
    for k in range(3):
        np.testing.assert_array_equal(out.chains[k], arr[0, k])


def test_union_length_law():
    out = combine_union(np.zeros((5, 2, 3000, 1)))
    assert out.draws.shape == (2, 15000, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(2, 30), st.integers(0, 2 ** 32 - 1))
def test_union_preserves_multiset_and_mean(S, K, D, seed):
    arr = _grid(S, K, D, 2, seed)
    out = combine_union(arr)
    eq = combine(arr, "equal")
    for k in range(K):
        np.testing.assert_array_equal(np.sort(out.chains[k], axis=0), np.sort(arr[:, k].reshape(-1, 2), axis=0))
        np.testing.assert_allclose(out.chains[k].mean(axis=0), eq.chains[k].mean(axis=0), atol=1e-12)


def test_union_rejects_mismatched_names():
    a = _chain(np.zeros((4, 2)), ["x", "y"])
    b = _chain(np.zeros((4, 2)), ["x", "z"], s=1)
    with pytest.raises(ValueError, match="names"):
        combine_union([[a], [b]])


def test_union_rejects_mismatched_shapes():
    a = _chain(np.zeros((4, 2)), ["x", "y"])
    b = _chain(np.zeros((5, 2)), ["x", "y"], s=1)
    with pytest.raises(ValueError, match="shape"):
        combine_union([[a], [b]])
    with pytest.raises(ValueError, match="chains"):
        combine_union([[a, a], [a]])


def test_chain_draw_objects_are_accepted():
    arr = _grid(2, 2, 10, 3, 4)
    nested = [[_chain(arr[s, k], "abc", s, k) for k in range(2)] for s in range(2)]
    stacked, names = stack_draws(nested)
    np.testing.assert_array_equal(stacked, arr)
    assert names == ("a", "b", "c")
    np.testing.assert_array_equal(combine(nested, "precision").draws, combine(arr, "precision", "abc").draws)


# weights --------------------------------------------------------------------
def test_equal_weights_examples():
    assert np.all(equal_weights(5, 2, 3).weights == 0.2)
    assert np.all(equal_weights(1, 2, 3).weights == 1.0)


@given(st.integers(1, 50), st.integers(1, 4), st.integers(1, 6))
def test_equal_weights_sum_to_one(S, K, P):
    w = equal_weights(S, K, P).weights
    assert np.max(np.abs(w.sum(axis=0) - 1.0)) <= 1e-12


def test_equal_weights_rejects_zero():
    with pytest.raises(ValueError):
        equal_weights(0, 1, 1)


def test_precision_weights_variances_one_and_four():
    rng = np.random.default_rng(7)
    z = rng.normal(size=200)
    z = (z - z.mean()) / z.std(ddof=1)  # sample variance exactly 1
    arr = np.stack([z, 2 * z])[:, None, :, None]
    w = precision_weights(arr).weights[:, 0, 0]
    np.testing.assert_allclose(w, [0.8, 0.2], atol=1e-12)


def test_precision_weights_equal_for_permuted_draws():
    rng = np.random.default_rng(8)
    base = rng.normal(size=(50, 2))
    arr = np.stack([rng.permutation(base) for _ in range(4)])[:, None]
    np.testing.assert_allclose(precision_weights(arr).weights, 0.25, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2 ** 32 - 1), st.floats(-1e3, 1e3))
def test_precision_weights_translation_invariant(S, seed, c):
    arr = _grid(S, 2, 40, 3, seed, scale=np.arange(1, S + 1))
    np.testing.assert_allclose(precision_weights(arr + c).weights, precision_weights(arr).weights,
                               rtol=1e-6, atol=1e-9)


def test_precision_weights_need_two_draws():
    with pytest.raises(ValueError):
        precision_weights(np.zeros((2, 1, 1, 1)))


def test_precision_weights_match_direct_formula():
    arr = _grid(3, 2, 30, 2, 9, scale=[1.0, 2.0, 0.5])
    w = precision_weights(arr).weights
    for k, p in itertools.product(range(2), range(2)):
        prec = [1.0 / np.var(arr[s, k, :, p], ddof=1) for s in range(3)]
        np.testing.assert_allclose(w[:, k, p], np.array(prec) / sum(prec), rtol=1e-12)


def test_pooled_weights_use_all_chains():
    arr = _grid(2, 3, 25, 1, 10, scale=[1.0, 3.0])
    table = precision_weights(arr)
    prec = [1.0 / np.var(arr[s].ravel(), ddof=1) for s in range(2)]
    np.testing.assert_allclose(table.pooled[:, 0], np.array(prec) / sum(prec), rtol=1e-12)


def test_zero_variance_warns_and_dominates():
    arr = _grid(2, 1, 10, 1, 11)
    arr[0] = 1.5
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        w = precision_weights(arr).weights[:, 0, 0]
    assert w[0] > 1 - 1e-9 and abs(w.sum() - 1) < 1e-12


def test_weight_table_validation():
    with pytest.raises(ValueError):
        WeightTable("precision", np.full((2, 1, 1), 0.6))
    with pytest.raises(ValueError):
        WeightTable("precision", np.array([[[1.5]], [[-0.5]]]))
    with pytest.raises(ValueError):
        WeightTable("precision", np.ones((2, 2)))
    rows = list(WeightTable("equal", np.full((2, 1, 2), 0.5), ("a", "b")).rows())
    assert rows[0] == (0, 0, "a", 0.5) and len(rows) == 4


# weighted combination -------------------------------------------------------
def test_weighted_examples():
    arr = np.array([[[[2.0]]], [[[4.0]]]])
    assert combine(arr, "equal").chains[0][0, 0] == 3.0
    table = WeightTable("precision", np.array([[[0.8]], [[0.2]]]))
    assert combine_weighted(np.array([[[[10.0]]], [[[0.0]]]]), table).chains[0][0, 0] == pytest.approx(8.0, abs=1e-14)


def test_weighted_single_subsample_is_identity():
    arr = _grid(1, 2, 15, 3, 12)
    for method in ("equal", "precision"):
        np.testing.assert_array_equal(combine(arr, method).draws, arr[0])


def test_weighted_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        combine_weighted(_grid(2, 1, 5, 2), equal_weights(3, 1, 2))


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        combine(_grid(2, 1, 5, 1), "median")


def test_equal_and_precision_agree_when_variances_match():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(3, 2, 100, 2))
    z = (z - z.mean(axis=2, keepdims=True)) / z.std(axis=2, ddof=1, keepdims=True)
    z += rng.normal(size=(3, 2, 1, 2))  # different means, identical variances
    np.testing.assert_allclose(combine(z, "precision").draws, combine(z, "equal").draws, atol=1e-9)


def test_union_wider_than_equal_when_means_differ():
    rng = np.random.default_rng(14)
    arr = rng.normal(0, 1, (3, 2, 500, 1)) + np.array([-2.0, 0.0, 2.0])[:, None, None, None]
    u, e = combine(arr, "union"), combine(arr, "equal")
    for k in range(2):
        assert u.chains[k].var(ddof=1) >= e.chains[k].var(ddof=1)


def test_gaussian_exactness_small():
    rng = np.random.default_rng(15)
    mu, tau = np.array([-1.0, 0.5, 2.0]), np.array([1.0, 4.0, 0.25])
    D = 20000
    arr = (mu[:, None] + rng.standard_normal((3, D)) / np.sqrt(tau)[:, None])[:, None, :, None]
    out = combine(arr, "precision").chains[0][:, 0]
    m, v = gaussian_product_oracle(mu, tau)
    assert abs(out.mean() - m) < 3 * consensus_mean_se(mu, tau, D)
    assert abs(out.var(ddof=1) - v) < 3 * v * np.sqrt(2 / (D - 1))



def test_consensus_mean_spread_includes_weight_noise():
    rng = np.random.default_rng(16)
    mu, tau, D = np.array([-0.8, 0.3, 1.5]), np.array([2.0, 0.5, 5.0]), 4000
    means = []
    for _ in range(400):
        arr = (mu[:, None] + rng.standard_normal((3, D)) / np.sqrt(tau)[:, None])[:, None, :, None]
        means.append(combine(arr, "precision").chains[0][:, 0].mean())
    se = consensus_mean_se(mu, tau, D)
    # sd of 400 replicates is within about 3.5% of its target; allow 4 of those
    assert np.std(means, ddof=1) == pytest.approx(se, rel=0.15)
    assert se > 2 * np.sqrt(gaussian_product_oracle(mu, tau)[1] / D)

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 5))
def test_weighted_log_cholesky_rows_stay_valid(seed, S):
    lay = ParamLayout(("intercept", "ns1"), ("sex",), 2, "weibull")
    arr = np.random.default_rng(seed).normal(0, 2, (S, 2, 20, len(lay)))
    for method in ("equal", "precision"):
        nat = lay.to_constrained(combine(arr, method, lay.names).draws)
        assert np.all(nat[..., lay.constrained_names.index("sigma_y")] > 0)
        assert np.all(np.linalg.eigvalsh(lay.covariance(combine(arr, method, lay.names).draws)) > 0)


# product oracle -------------------------------------------------------------
def test_product_oracle_examples():
    assert gaussian_product_oracle([0.0, 2.0], [1.0, 1.0]) == (1.0, 0.5)
    assert gaussian_product_oracle([3.0], [4.0]) == (3.0, 0.25)


@given(arrays(float, st.integers(1, 6), elements=st.floats(-100, 100)),
       st.randoms(use_true_random=False))
def test_product_oracle_permutation_invariant(mu, rnd):
    tau = np.linspace(0.5, 3.0, mu.size)
    order = list(range(mu.size))
    rnd.shuffle(order)
    a = gaussian_product_oracle(mu, tau)
    b = gaussian_product_oracle(mu[order], tau[order])
    assert a[0] == pytest.approx(b[0], abs=1e-9) and a[1] == pytest.approx(b[1], rel=1e-12)


def test_product_oracle_rejects_nonpositive_precision():
    for tau in ([1.0, 0.0], [1.0, -2.0], [float("nan"), 1.0]):
        with pytest.raises(ValueError):
            gaussian_product_oracle([0.0, 1.0], tau)


def test_no_warning_for_healthy_chains():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        precision_weights(_grid(3, 2, 10, 2, 16))
