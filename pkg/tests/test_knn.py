import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import naive_knn
from odit.core import DataError, Dataset, ObservationVector
from odit.knn import (ApproxIndex, ExactIndex, approx_knn, build_kmeans_tree, exact_knn, make_index,
                      per_dimension_gaps)


def _check_against_oracle(Y, Q, k, exclude=None):
    d, idx = ExactIndex(Y).query(Q, k, exclude=exclude)
    for r, q in enumerate(Q):
        ref = naive_knn(q, Y, k, None if exclude is None else exclude[r])
        assert [j for _, j in ref] == idx[r].tolist()
        np.testing.assert_allclose(d[r] ** 2, [v for v, _ in ref], rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12).flatmap(lambda d: st.tuples(
    hnp.arrays(np.float64, st.tuples(st.integers(3, 40), st.just(d)), elements=st.integers(-3, 3).map(float)),
    hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.just(d)), elements=st.integers(-3, 3).map(float)))),
    st.integers(1, 3))
def test_exact_matches_naive_with_ties(data, k):
    Y, Q = data
    k = min(k, Y.shape[0])
    _check_against_oracle(Y, Q, k)


@pytest.mark.parametrize("d", [3, 20, 50])
def test_exact_random_dense(rng, d):
    Y = rng.standard_normal((3000, d))
    Q = rng.standard_normal((20, d))
    _check_against_oracle(Y, Q, 4)


@pytest.mark.parametrize("d", [2, 30])
def test_self_exclusion(rng, d):
    Y = rng.standard_normal((400, d))
    Y[10] = Y[11]  # a duplicate must still be found when its twin is excluded
    ex = np.arange(50)
    _check_against_oracle(Y, Y[:50], 2, exclude=ex)
    _, idx = ExactIndex(Y).query(Y[:50], 1, exclude=ex)
    assert idx[10, 0] == 11 and np.all(idx[:, 0] != ex)


def test_exact_knn_examples():
    ref = Dataset([[0.0], [1.0], [3.0]])
    res = exact_knn(ObservationVector([0.5], 1), ref, 2)
    np.testing.assert_allclose(res.distances, [0.5, 0.5])
    assert res.neighbor_indices.tolist() == [0, 1]
    res = exact_knn([1.0], ref, 1)
    assert res.distances[0] == 0
    with pytest.raises(DataError):
        exact_knn([1.0], ref, 4)
    with pytest.raises(DataError):
        exact_knn([1.0, 2.0], ref, 1)


def test_decomposition_sums_to_squared_distance(rng):
    Y = rng.standard_normal((200, 7))
    x = rng.standard_normal(7)
    res = exact_knn(x, Y, 3, want_decomposition=True, s=2)
    np.testing.assert_allclose(res.per_dimension_sq.sum(), (res.distances[1:] ** 2).sum(), rtol=1e-12)


def test_per_dimension_gaps_axis_aligned():
    gaps = per_dimension_gaps(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]), np.array([[0]]), 1)
    assert gaps.tolist() == [[1.0, 0.0]]


def test_kmeans_tree_small_is_single_leaf(rng):
    tree = build_kmeans_tree(rng.standard_normal((50, 3)), C=100)
    assert tree.height() == 0
    leaves = list(tree.leaves())
    assert len(leaves) == 1 and sorted(leaves[0].indices.tolist()) == list(range(50))


def test_kmeans_tree_partition_height_and_determinism(rng):
    Y = rng.standard_normal((10000, 4))
    t1 = build_kmeans_tree(Y, C=100, Imax=5, seed=1)
    t2 = build_kmeans_tree(Y, C=100, Imax=5, seed=1)
    allidx = np.sort(np.concatenate([l.indices for l in t1.leaves()]))
    assert np.array_equal(allidx, np.arange(10000))
    # height counts edges below the root
    assert 1 <= t1.height() <= int(np.ceil(np.log(10000) / np.log(100)))
    assert t1.structure() == t2.structure()


def test_approx_full_budget_equals_exact(rng):
    Y = rng.standard_normal((3000, 10))
    Q = rng.standard_normal((30, 10))
    tree = build_kmeans_tree(Y, C=8, Imax=5, seed=0)
    da, ia = ApproxIndex(tree, B=len(Y)).query(Q, 3)
    de, ie = ExactIndex(Y).query(Q, 3)
    assert np.array_equal(ia, ie) and np.array_equal(da, de)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_approx_self_query_finds_itself(seed, B):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((300, 5))
    tree = build_kmeans_tree(Y, C=6, Imax=4, seed=seed)
    i = int(rng.integers(300))
    res = approx_knn(Y[i], tree, 1, max(B, 1))
    assert res.distances[0] == 0.0


def test_approx_never_beats_exact(rng):
    Y = rng.standard_normal((2000, 8))
    Q = rng.standard_normal((40, 8))
    tree = build_kmeans_tree(Y, C=10, Imax=5, seed=0)
    da, ia = ApproxIndex(tree, B=100).query(Q, 2)
    de, _ = ExactIndex(Y).query(Q, 2)
    assert np.all(da >= de - 1e-12)
    # reported distances are the true distances of the returned points
    np.testing.assert_allclose(da[:, 0], np.linalg.norm(Y[ia[:, 0]] - Q, axis=1), rtol=1e-12)


def test_approx_recall(rng):
    Y = rng.standard_normal((20000, 10))
    Q = rng.standard_normal((100, 10))
    tree = build_kmeans_tree(Y, C=20, Imax=5, seed=0)
    _, ia = ApproxIndex(tree, B=1000).query(Q, 1)
    _, ie = ExactIndex(Y).query(Q, 1)
    assert (ia[:, 0] == ie[:, 0]).mean() >= 0.6


def test_budget_errors(rng):
    tree = build_kmeans_tree(rng.standard_normal((30, 2)), C=4)
    with pytest.raises(DataError):
        approx_knn([0.0, 0.0], tree, 3, B=2)
    with pytest.raises(DataError):
        ApproxIndex(tree, B=0)
    with pytest.raises(DataError):
        make_index(np.zeros((3, 1)), "bogus")
