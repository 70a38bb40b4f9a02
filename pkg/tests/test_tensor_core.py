import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvshare.tensor_core import (DimensionError, cosine_similarity, euclidean_distance, matmul,
                                 softmax_rows)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def test_matmul_identity():
    out = matmul(np.eye(2, dtype=np.float32), np.array([[3, 4], [5, 6]], dtype=np.float32))
    assert out.tolist() == [[3, 4], [5, 6]]


def test_matmul_row_by_column():
    assert matmul(np.array([[1, 2]], np.float32), np.array([[3], [4]], np.float32)).tolist() == [[11]]


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))


def test_matmul_identity_is_bitwise(rng):
    x = rng.standard_normal((6, 9)).astype(np.float32)
    assert np.array_equal(matmul(np.eye(6, dtype=np.float32), x), x)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3), np.float32)), [[1 / 3] * 3], atol=1e-7)
    np.testing.assert_allclose(softmax_rows(np.array([[1000, 1000]], np.float32)), [[0.5, 0.5]])
    x = np.array([1.0, 2.0, 3.0])
    e = [math.exp(v - 3.0) for v in x]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(softmax_rows(x[None].astype(np.float32))[0], expected, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax_rows(x).sum(axis=-1), 1.0, atol=1e-5)


def test_euclidean_examples(rng):
    assert euclidean_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert euclidean_distance([0, 0], [3, 4]) == 5.0
    a = rng.standard_normal(1024).astype(np.float32)
    b = rng.standard_normal(1024).astype(np.float32)
    acc = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        acc += (x - y) ** 2
    assert euclidean_distance(a, b) == pytest.approx(math.sqrt(acc), rel=1e-5)


def test_euclidean_length_mismatch():
    with pytest.raises(DimensionError):
        euclidean_distance([1.0], [1.0, 2.0])


vec = arrays(np.float32, 16, elements=st.floats(-100, 100, width=32))


@settings(max_examples=80, deadline=None)
@given(vec, vec, vec)
def test_euclidean_symmetry_and_triangle(a, b, c):
    assert euclidean_distance(a, b) == euclidean_distance(b, a)
    assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-5


def test_cosine_examples():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([0, 0], [1, 2]) == 0.0
    with pytest.raises(DimensionError):
        cosine_similarity([1, 2], [1, 2, 3])


@settings(max_examples=80, deadline=None)
@given(vec, vec, st.floats(0.01, 100))
def test_cosine_positive_scaling(a, b, k):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert cosine_similarity(a * np.float32(k), b) == pytest.approx(cosine_similarity(a, b), abs=1e-6)
