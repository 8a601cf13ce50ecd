"""Tests for the MSE loss, Adam and the finite-difference oracle."""

import numpy as np
import pytest

from models.gradcheck import finite_diff_check, numerical_gradient
from models.losses import mse_loss
from models.optimizer import AdamState, adam_step
from utils.exceptions import NumericError, ShapeError, ValidationError


class TestMseLoss:
    def test_value_and_gradient(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        target = np.array([[1.0, 1.0], [1.0, 1.0]])
        loss, grad = mse_loss(pred, target)
        assert loss == pytest.approx((0 + 1 + 4 + 9) / 4)
        np.testing.assert_allclose(grad, 2.0 * (pred - target) / 4)

    def test_gradient_passes_finite_difference_check(self):
        rng = np.random.default_rng(0)
        target = rng.standard_normal(12)
        point = rng.standard_normal(12)

        def f(x):
            return mse_loss(x, target)[0]

        assert finite_diff_check(f, lambda x: mse_loss(x, target)[1], point) < 1e-6

    def test_float32_loss_accumulates_in_float64(self):
        pred = np.full(10, 0.1, dtype=np.float32)
        loss, grad = mse_loss(pred, np.zeros(10, dtype=np.float32))
        assert isinstance(loss, float)
        assert grad.dtype == np.float32

    def test_known_values(self):
        assert mse_loss(np.ones(3), np.ones(3))[0] == 0.0
        assert mse_loss(np.array([1.0, 1.0]), np.zeros(2))[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(3), np.zeros(4))


class TestAdam:
    def setup_method(self):
        self.params = {'w': np.array([1.0, -2.0]), 'b': np.array([0.5])}
        self.state = AdamState.create(self.params)

    def test_first_step_moves_by_lr_against_gradient(self):
        grads = {'w': np.array([0.3, -4.0]), 'b': np.array([1e-3])}
        new, state = adam_step(self.params, grads, self.state, lr=0.01)
        # bias-corrected first step is lr * sign(g) up to epsilon
        np.testing.assert_allclose(new['w'], [0.99, -1.99], rtol=1e-6)
        np.testing.assert_allclose(new['b'], [0.49], rtol=1e-4)
        assert state.step == 1

    def test_single_scalar_step(self):
        params = {'p': np.array([0.0])}
        new, _ = adam_step(params, {'p': np.array([1.0])}, AdamState.create(params), lr=0.001)
        assert new['p'][0] == pytest.approx(-0.001, rel=1e-6)

    def test_zero_gradient_leaves_params_unchanged(self):
        grads = {'w': np.zeros(2), 'b': np.zeros(1)}
        new, _ = adam_step(self.params, grads, self.state, lr=0.1)
        np.testing.assert_array_equal(new['w'], self.params['w'])
        np.testing.assert_array_equal(new['b'], self.params['b'])

    def test_inputs_are_not_mutated(self):
        before = {k: v.copy() for k, v in self.params.items()}
        grads = {'w': np.ones(2), 'b': np.ones(1)}
        adam_step(self.params, grads, self.state, lr=0.1)
        for key in before:
            np.testing.assert_array_equal(self.params[key], before[key])
        assert self.state.step == 0
        np.testing.assert_array_equal(self.state.first_moment['w'], np.zeros(2))

    def test_matches_reference_over_several_steps(self):
        value = np.array([0.7])
        m = v = 0.0
        params, state = {'x': value.copy()}, AdamState.create({'x': value})
        for step in range(1, 6):
            g = 2.0 * params['x']
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected = params['x'] - 0.05 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
            params, state = adam_step(params, {'x': g}, state, lr=0.05)
            np.testing.assert_allclose(params['x'], expected, rtol=1e-12)

    def test_non_positive_lr(self):
        grads = {'w': np.ones(2), 'b': np.ones(1)}
        with pytest.raises(ValidationError):
            adam_step(self.params, grads, self.state, lr=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(self.params, {'w': np.ones(3), 'b': np.ones(1)}, self.state, lr=0.1)
        with pytest.raises(ShapeError):
            adam_step(self.params, {'w': np.ones(2)}, self.state, lr=0.1)

    def test_non_finite_gradient(self):
        grads = {'w': np.array([np.nan, 0.0]), 'b': np.ones(1)}
        with pytest.raises(NumericError):
            adam_step(self.params, grads, self.state, lr=0.1)


def test_numerical_gradient_of_quadratic():
    grad = numerical_gradient(lambda x: float(np.sum(x ** 2)), np.array([1.0, -3.0]))
    np.testing.assert_allclose(grad, [2.0, -6.0], rtol=1e-8)


def test_finite_diff_check_flags_wrong_gradient():
    def f(x):
        return float(np.sum(x ** 2))

    assert finite_diff_check(f, np.array([1.0, 1.0]), np.array([1.0, 1.0])) > 0.1
