import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagann import autodiff as ad
from stagann.graph import Adjacency, gin_layer, masked_gnn_layer, row_normalize, topk_mask, topk_sparsify


def ident(t):
    return t


X3 = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]])


def test_masked_gnn_examples():
    np.testing.assert_array_equal(masked_gnn_layer(X3, np.eye(3), ident).data, X3)
    out = masked_gnn_layer(X3, np.zeros((3, 3)), lambda t: ad.add(t, 1.0)).data
    np.testing.assert_array_equal(out, np.ones((3, 2)))


def test_masked_gnn_star_hand_case():
    star = row_normalize(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]]))
    out = masked_gnn_layer(X3, star, ident).data
    # centre averages the leaves; each leaf copies the centre
    np.testing.assert_allclose(out, [[1.75, 1.5], [1.0, 2.0], [1.0, 2.0]], rtol=0, atol=1e-12)


def test_gin_examples():
    np.testing.assert_array_equal(gin_layer(X3, np.zeros((3, 3)), 0.0, ident).data, X3)
    np.testing.assert_allclose(gin_layer(X3, np.eye(3), 1.0, ident).data, 3 * X3, atol=1e-12)


def test_gin_chain_hand_case():
    chain = row_normalize(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]]))
    out = gin_layer(X3, chain, 0.5, ident).data
    expected = np.array([
        [1.5 * 1 + 3, 1.5 * 2 - 1],
        [1.5 * 3 + 0.75, 1.5 * -1 + 3.0],
        [1.5 * 0.5 + 3, 1.5 * 4 - 1],
    ])
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        masked_gnn_layer(np.ones((4, 2)), np.eye(3), ident)


def test_adjacency_validation():
    with pytest.raises(ValueError):
        Adjacency(-np.eye(2))
    with pytest.raises(ad.DimensionError):
        Adjacency(np.ones((2, 3)))


def test_row_normalize_keeps_empty_rows_zero():
    a = row_normalize(np.array([[0, 2, 2], [0, 0, 0], [1, 0, 5]]))
    np.testing.assert_allclose(a.weights, [[0, 0.5, 0.5], [0, 0, 0], [1, 0, 0]])


def test_topk_examples():
    s = np.array([[0.0, 0.9], [0.8, 0.0]])
    np.testing.assert_array_equal(topk_sparsify(s, 1).data, [[0, 1], [1, 0]])
    full = topk_sparsify(np.zeros((4, 4)), 10).data
    np.testing.assert_allclose(full, (1 - np.eye(4)) / 3, atol=1e-15)
    # a large diagonal score is never a candidate
    s = np.array([[9.0, 0.5, 0.5, 0.1]]).repeat(4, 0)
    assert topk_mask(s, 1)[0].tolist() == [False, True, False, False]


def test_topk_tie_row_from_examples():
    # off-diagonal candidates [0.5, 0.5, 0.1] for row 3: column 0 is kept
    s = np.array([[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0.5, 0.5, 0.1, 0.0]])
    assert topk_mask(s, 1)[3].tolist() == [True, False, False, False]


def brute_force_topk(row, i, k):
    cands = [j for j in range(len(row)) if j != i]
    keep = min(k, len(cands))
    # lexicographic: larger score first, then lower index
    best = sorted(cands, key=lambda j: (-row[j], j))[:keep]
    return set(best)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_topk_exhaustive_small_graphs(n):
    # rows are independent, so every row pattern over n score levels (all
    # orderings and tie structures) is checked in every row position
    for pattern in itertools.product(range(n), repeat=n):
        s = np.tile(np.array(pattern, dtype=np.float64), (n, 1))
        for k in range(1, n + 1):
            mask = topk_mask(s, k)
            for i in range(n):
                assert set(np.flatnonzero(mask[i])) == brute_force_topk(s[i], i, k)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 12), st.integers(0, 10_000))
def test_topk_row_cardinality_and_sums(n, k, seed):
    s = np.random.default_rng(seed).normal(size=(n, n))
    a = topk_sparsify(s, k).data
    np.testing.assert_array_equal((a > 0).sum(1), np.full(n, min(k, n - 1)))
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-12)
    assert np.all(np.diag(a) == 0)


def test_topk_single_sensor_is_zero():
    assert topk_sparsify(np.ones((1, 1)), 3).data.tolist() == [[0.0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_layers_are_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n = 6
    x = rng.normal(size=(n, 3))
    w = row_normalize(np.abs(rng.normal(size=(n, n)))).weights
    perm = rng.permutation(n)
    mlp = lambda t: ad.tanh(ad.matmul(t, np.ones((3, 2))))  # noqa: E731
    a = masked_gnn_layer(x, w, mlp).data
    b = masked_gnn_layer(x[perm], w[np.ix_(perm, perm)], mlp).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)
    a = gin_layer(x, w, 0.3, mlp).data
    b = gin_layer(x[perm], w[np.ix_(perm, perm)], 0.3, mlp).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)
