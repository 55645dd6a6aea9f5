from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prvr import tensor as T
from prvr.errors import BatchError, DegenerateInputError, ParameterError
from prvr.similarity import (batch_partial_similarity, branch_correlation, cosine, fuse,
                             frame_distribution, pairwise_matrix, partial_similarity,
                             write_matrix_csv)
from prvr.tensor import Tensor, check_gradients


def test_cosine_basics():
    assert float(cosine([1.0, 0.0], [0.0, 2.0])) == 0.0
    assert float(cosine([3.0, 4.0], [6.0, 8.0])) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_partial_similarity_is_max_frame(rng):
    F = rng.standard_normal((6, 4))
    q = rng.standard_normal(4)
    dist = frame_distribution(F, q).data
    want = (F / np.linalg.norm(F, axis=1, keepdims=True)) @ (q / np.linalg.norm(q))
    np.testing.assert_allclose(dist, want, atol=1e-12)
    assert float(partial_similarity(F, q)) == pytest.approx(want.max(), abs=1e-12)


def test_pairwise_matrix_ragged(rng):
    vids = [rng.standard_normal((k, 5)) for k in (3, 7, 1)]
    qs = [rng.standard_normal(5) for _ in range(3)]
    S = pairwise_matrix([Tensor(v) for v in vids], [Tensor(q) for q in qs]).data
    for i, v in enumerate(vids):
        for j, q in enumerate(qs):
            assert S[i, j] == pytest.approx(float(partial_similarity(v, q)), abs=1e-12)
    with pytest.raises(BatchError):
        pairwise_matrix(vids[:2], qs)


def test_batch_partial_similarity_gradient(rng):
    q = Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((2, 3))
    err = check_gradients(lambda t: (batch_partial_similarity(t, q)[0] * w).sum(),
                          rng.standard_normal((2, 5, 4)))
    assert err < 1e-5


def test_fuse_endpoints_exact(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert np.array_equal(fuse(a, b, 0.0), a)
    assert np.array_equal(fuse(a, b, 1.0), b)
    np.testing.assert_allclose(fuse(a, b, 0.25), 0.75 * a + 0.25 * b)
    with pytest.raises(ParameterError):
        fuse(a, b, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=20), st.floats(0.1, 10), st.floats(-3, 3))
def test_correlation_affine_invariant(xs, scale, shift):
    a = np.array(xs)
    if np.ptp(a) < 1e-3:
        return
    b = a * scale + shift
    assert branch_correlation(a, b) == pytest.approx(1.0, abs=1e-9)
    assert branch_correlation(a, -b) == pytest.approx(-1.0, abs=1e-9)


def test_correlation_zero_variance():
    with pytest.raises(DegenerateInputError):
        branch_correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_matrix_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_matrix_csv(path, np.array([[1 / 3, 2.0]]), ["v0"], ["q0", "q1"])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["video_id", "q0", "q1"]
    assert rows[1] == ["v0", "0.333333333", "2"]
