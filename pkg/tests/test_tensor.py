from __future__ import annotations

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prvr import tensor as T
from prvr.errors import ContractError, DimensionError, ParameterError
from prvr.tensor import Tape, Tensor, check_gradients

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)
matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite)


def test_nothing_recorded_outside_a_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    with Tape() as tape:
        pass
    assert len(tape) == 0
    assert y.grad is None and x.grad is None


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_reused_tensor_sums_paths():
    x = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x + x * 3.0).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_rejects_nonpositive_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(ParameterError):
            T.softmax(Tensor(np.ones(3)), temperature=tau)
        with pytest.raises(ParameterError):
            T.log_softmax(Tensor(np.ones(3)), temperature=tau)


def test_max_reduce_first_occurrence_and_gradient():
    x = Tensor(np.array([1.0, 3.0, 3.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        m, idx = T.max_reduce(x)
    assert idx == 1 and float(m) == 3.0
    tape.backward(m)
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])
    with pytest.raises(DimensionError):
        T.max_reduce(Tensor(np.zeros(0)))


def test_max_reduce_along_axis():
    x = np.array([[1.0, 5.0], [7.0, 2.0], [7.0, 5.0]])
    out, idx = T.max_reduce(Tensor(x), axis=0)
    np.testing.assert_array_equal(out.data, [7.0, 5.0])
    np.testing.assert_array_equal(idx, [1, 0])


def test_check_gradients_eps_bounds():
    for eps in (1e-8, 1e-2):
        with pytest.raises(ParameterError):
            check_gradients(lambda t: t.sum(), np.ones(2), eps=eps)


def test_check_gradients_flags_wrong_backward():
    def bad_square(x):
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,))

    assert check_gradients(lambda t: bad_square(t).sum(), np.array([1.0, 2.0])) > 0.1


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "gelu", "div", "getitem", "concat", "mean"])
def test_elementwise_and_shape_gradients(op, rng):
    x0 = rng.uniform(0.5, 2.0, size=(3, 4))
    other = rng.uniform(0.5, 2.0, size=(3, 4))
    fns = {
        "exp": lambda t: T.exp(t).sum(),
        "log": lambda t: T.log(t).sum(),
        "sqrt": lambda t: T.sqrt(t).sum(),
        "gelu": lambda t: (T.gelu(t - 1.2) * other).sum(),
        "div": lambda t: (Tensor(other) / t).sum() + (t / Tensor(other)).sum(),
        "getitem": lambda t: (t[np.array([0, 2, 2]), np.array([1, 1, 3])] * 1.5).sum(),
        "concat": lambda t: (T.concat([t, t * 2.0], axis=1) * np.ones((3, 8))).sum(),
        "mean": lambda t: (t.mean(axis=0) * other[0]).sum(),
    }
    assert check_gradients(fns[op], x0) < 1e-6


def test_batched_matmul_gradient(rng):
    b = rng.standard_normal((2, 4, 3))
    w = rng.standard_normal((2, 5, 3))
    assert check_gradients(lambda t: ((t @ Tensor(b)) * w).sum(), rng.standard_normal((2, 5, 4))) < 1e-6


def test_gelu_matches_high_precision_tanh_form():
    xs = np.linspace(-6, 6, 41)
    got = T.gelu(Tensor(xs)).data
    mpmath.mp.dps = 40
    c = mpmath.sqrt(2 / mpmath.pi)
    for x, g in zip(xs, got):
        x = mpmath.mpf(float(x))
        want = 0.5 * x * (1 + mpmath.tanh(c * (x + mpmath.mpf("0.044715") * x ** 3)))
        assert abs(float(want) - g) < 1e-12


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0.05, 5.0))
def test_softmax_rows_are_distributions(x, tau):
    p = T.softmax(Tensor(x), axis=-1, temperature=tau).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(matrices, finite)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.floats(0.05, 5.0))
def test_log_softmax_matches_high_precision(x, tau):
    got = T.log_softmax(Tensor(x), temperature=tau).data
    mpmath.mp.dps = 50
    vals = [mpmath.mpf(float(v)) / mpmath.mpf(tau) for v in x]
    lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in vals))
    want = np.array([float(v - lse) for v in vals])
    np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-11)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 7)), elements=finite))
def test_layer_norm_rows_standardised(x):
    if np.any(np.ptp(x, axis=-1) < 1e-3):
        return
    out = T.layer_norm(Tensor(x), np.ones(x.shape[-1]), np.zeros(x.shape[-1])).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), rtol=1e-9)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ParameterError):
        T.layer_norm(Tensor(np.ones((2, 3))), np.ones(3), np.zeros(3), eps=0.0)
