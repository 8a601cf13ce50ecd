"""Tests for the dense convolution, its adjoint and the MAC counter."""

import numpy as np
import pytest

from models.conv import (
    MacCounter, conv2d_backward, conv2d_forward, relu_backward, relu_forward, same_padding,
)
from models.cost_model import conv_macs
from models.gradcheck import finite_diff_check
from utils.exceptions import ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_same_padding_odd_and_even():
    assert same_padding(3) == (1, 1)
    assert same_padding(1) == (0, 0)
    assert same_padding(4) == (1, 2)


def test_im2col_matches_naive(rng):
    x = rng.standard_normal((2, 3, 9, 7))
    kernel = rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    fast = conv2d_forward(x, kernel, bias)
    slow = conv2d_forward(x, kernel, bias, method='naive')
    assert fast.shape == (2, 4, 9, 7)
    np.testing.assert_allclose(fast, slow, rtol=1e-6, atol=1e-9)


def test_im2col_matches_naive_for_even_kernel(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    kernel = rng.standard_normal((2, 2, 4, 4))
    fast = conv2d_forward(x, kernel, allow_even=True)
    slow = conv2d_forward(x, kernel, method='naive', allow_even=True)
    np.testing.assert_allclose(fast, slow, rtol=1e-6, atol=1e-9)


def test_even_kernel_rejected_by_default(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((2, 2, 4, 4)))


def test_identity_kernel_is_cross_correlation(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 2] = 1.0  # picks the right-hand neighbour, no flip
    out = conv2d_forward(x, kernel)
    np.testing.assert_allclose(out[0, 0, :, :-1], x[0, 0, :, 1:])
    np.testing.assert_allclose(out[0, 0, :, -1], 0.0)


def test_channel_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))


def test_bias_shape_checked(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((4, 2, 3, 3)), np.zeros(3))


def test_shape_error_is_a_value_error(rng):
    with pytest.raises(ValueError):
        conv2d_forward(rng.standard_normal((2, 5, 5)), rng.standard_normal((1, 2, 3, 3)))


def test_mac_counter_matches_analytic(rng):
    counter = MacCounter()
    x = rng.standard_normal((1, 3, 8, 6))
    conv2d_forward(x, rng.standard_normal((5, 3, 3, 3)), method='naive', counter=counter)
    assert counter.macs == conv_macs(3, 5, 3, 8, 6)


@pytest.mark.parametrize('method', ['im2col', 'naive'])
def test_conv_is_linear_in_its_input(rng, method):
    x = rng.standard_normal((2, 3, 7, 6))
    y = rng.standard_normal((2, 3, 7, 6))
    kernel = rng.standard_normal((4, 3, 3, 3))
    a, b = 1.7, -0.4
    combined = conv2d_forward(a * x + b * y, kernel, method=method)
    separate = a * conv2d_forward(x, kernel, method=method) + b * conv2d_forward(y, kernel, method=method)
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-12)


def test_backward_is_adjoint(rng):
    """<conv(x), g> must equal <x, dx> and <k, dk> for a linear map."""
    x = rng.standard_normal((2, 3, 6, 5))
    kernel = rng.standard_normal((4, 3, 3, 3))
    grad_out = rng.standard_normal((2, 4, 6, 5))
    out = conv2d_forward(x, kernel)
    grad_x, grad_k, grad_b = conv2d_backward(x, kernel, grad_out)
    inner = float(np.sum(out * grad_out))
    assert float(np.sum(x * grad_x)) == pytest.approx(inner, rel=1e-9)
    assert float(np.sum(kernel * grad_k)) == pytest.approx(inner, rel=1e-9)
    np.testing.assert_allclose(grad_b, grad_out.sum(axis=(0, 2, 3)))


def test_backward_checks_grad_shape(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    kernel = rng.standard_normal((3, 2, 3, 3))
    with pytest.raises(ShapeError):
        conv2d_backward(x, kernel, np.zeros((1, 2, 4, 4)))


def test_relu_pair():
    pre = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_forward(pre), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_backward(np.ones(3), pre), [0.0, 0.0, 1.0])


def test_all_ones_centre_value():
    out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_identity_kernel_and_its_adjoint(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    identity = np.zeros((3, 3, 3, 3))
    for c in range(3):
        identity[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d_forward(x, identity), x)
    grad_out = rng.standard_normal(x.shape)
    grad_x, _, _ = conv2d_backward(x, identity, grad_out)
    np.testing.assert_array_equal(grad_x, grad_out)


def test_zero_grad_output_gives_zero_gradients(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    grads = conv2d_backward(x, rng.standard_normal((3, 2, 3, 3)), np.zeros((1, 3, 4, 4)))
    for grad in grads:
        assert not np.any(grad)


def test_kernel_gradient_matches_finite_differences(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    weights = rng.standard_normal((1, 1, 4, 4))
    kernel = rng.standard_normal((1, 1, 3, 3))
    _, grad_k, _ = conv2d_backward(x, kernel, weights)

    def f(flat):
        return float(np.sum(conv2d_forward(x, flat.reshape(1, 1, 3, 3)) * weights))

    assert finite_diff_check(f, grad_k.ravel(), kernel.ravel(), step=1e-4) < 1e-5
