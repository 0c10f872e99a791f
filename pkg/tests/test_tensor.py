"""Autodiff engine: gradients against central differences, fused-op math."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbdvit.tensor import StateError, Tensor, concat, maximum, set_finite_checks

from conftest import fd_gradient

rng = np.random.default_rng(7)


def check_grad(build, x0, tol=1e-7):
    """Compare analytic gradient of scalar build(Tensor) against FD."""
    t = Tensor(x0.astype(np.float64), requires_grad=True)
    loss = build(t)
    loss.backward()
    fd = fd_gradient(lambda x: float(build(Tensor(x)).data), x0)
    denom = np.abs(fd) + 1e-8
    rel = np.abs(t.grad - fd) / denom
    assert rel.max() < tol, f"max rel err {rel.max():.3e}"


def test_arithmetic_chain_matches_fd():
    x0 = rng.normal(size=(3, 4))
    check_grad(lambda t: ((t * 2.0 + 1.0) ** 3 / 5.0 - t).sum(), x0)


def test_matmul_and_indexing_match_fd():
    a0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)))

    def build(t):
        y = t @ w
        return (y[1] * y[0]).sum() + y.swapaxes(0, 1).reshape(-1)[3] ** 2

    check_grad(build, a0)


def test_exp_log_sqrt_gelu_match_fd():
    x0 = rng.uniform(0.5, 2.0, size=(2, 5))
    check_grad(lambda t: (t.exp().log().sqrt().gelu()).sum(), x0)


def test_mean_and_broadcast_match_fd():
    x0 = rng.normal(size=(4, 1))
    other = Tensor(rng.normal(size=(3,)))
    check_grad(lambda t: ((t + other) * (t * other)).mean(), x0)


def test_unbroadcast_sums_over_expanded_axes():
    a = Tensor(np.ones((1, 3)), requires_grad=True)
    b = Tensor(np.ones((4, 3)), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (1, 3)
    np.testing.assert_array_equal(a.grad, np.full((1, 3), 4.0))
    np.testing.assert_array_equal(b.grad, np.ones((4, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    s = Tensor(x).softmax(axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)
    assert (s.data >= 0).all()


def test_softmax_gradient_matches_fd():
    x0 = rng.normal(size=(2, 5))
    w = Tensor(rng.normal(size=(5,)))
    check_grad(lambda t: (t.softmax(axis=-1) * w).sum(), x0)


def test_log_softmax_is_log_of_softmax():
    x = rng.normal(size=(4, 6))
    ls = Tensor(x).log_softmax(axis=-1).data
    np.testing.assert_allclose(ls, np.log(Tensor(x).softmax(axis=-1).data),
                               atol=1e-12)
    x0 = rng.normal(size=(2, 4))
    w = Tensor(rng.normal(size=(4,)))
    check_grad(lambda t: (t.log_softmax(axis=-1) * w).sum(), x0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 8),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_standardizes_last_axis(x):
    y = Tensor(x).layer_norm().data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    # variance 1 up to the eps regularizer (degenerate rows sit below 1)
    assert (y.var(axis=-1) <= 1.0 + 1e-4).all()


def test_layer_norm_variance_one_on_spread_rows():
    x = rng.normal(size=(6, 16)) * 3.0 + 1.0
    y = Tensor(x).layer_norm().data
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_gradient_matches_fd():
    x0 = rng.normal(size=(2, 6))
    w = Tensor(rng.normal(size=(6,)))
    check_grad(lambda t: (t.layer_norm() * w).sum(), x0, tol=1e-5)


def test_clamp_min_tie_passes_gradient():
    x = Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
    x.clamp_min(1.0).sum().backward()
    # below the floor: blocked; at the exact tie and above: passes
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_maximum_tie_routes_gradient_to_first_argument():
    a = Tensor(np.array([1.0, 3.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 4.0]), requires_grad=True)
    maximum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0, 1.0])


def test_concat_splits_gradient():
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    w = np.arange(10.0).reshape(2, 5)
    (concat([a, b], axis=1) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(a.grad, w[:, :3])
    np.testing.assert_array_equal(b.grad, w[:, 3:])


def test_diamond_graph_accumulates_both_paths():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = y + y * y              # dz/dx = 3 + 2*9*... = 3 + 2*6*3
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [3.0 + 2 * 6.0 * 3.0])


def test_backward_requires_scalar_and_recorded_graph():
    leaf = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(StateError):
        leaf.backward()
    vec = leaf * 2.0
    with pytest.raises(ValueError):
        vec.backward()


def test_detach_stops_gradient_flow():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = (x * 2.0).detach()
    assert y._parents == ()
    z = x * 1.0 + y
    z.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0])


def test_finite_checks_flag_catches_overflow():
    set_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            Tensor(np.array([1e30], dtype=np.float32), requires_grad=True) * 1e30
    finally:
        set_finite_checks(False)


def test_non_float_input_coerced_to_float32():
    t = Tensor(np.arange(4))
    assert t.dtype == np.float32


def test_grad_dtype_follows_parameter_dtype():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    (x * 2.0).sum().backward()
    assert x.grad.dtype == np.float32
