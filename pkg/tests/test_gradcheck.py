"""Central-difference checks of every backward pass, run in float64."""

import numpy as np
import pytest

from mpcn import layers
from mpcn.gradcheck import TOLERANCE, check_gradient, numeric_gradient, relative_error


def spread_values(rng, shape, step=0.1):
    """Random permutation scaled so every element differs by >= `step` and
    sits at least `step / 4` from zero — keeps max-pool and relu away from
    the kinks a 1e-3 perturbation could cross."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.25) * step
    return vals.reshape(shape).astype(np.float64)


def weighted_sum_loss(layer_forward, weighting):
    def fn():
        return float(np.sum(layer_forward() * weighting))
    return fn


class TestNumericGradientHarness:
    def test_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        grad = numeric_gradient(lambda: float(np.sum(x ** 2)), x)
        np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.array([1e-6]), np.array([0.0])) == pytest.approx(1e-2)


class TestConvGradients:
    def setup_method(self):
        rng = np.random.default_rng(101)
        self.x = rng.standard_normal((2, 2, 5, 5))
        self.conv = layers.Conv2d(2, 3, kernel=3, stride=2, pad=1, rng=rng, dtype=np.float64)
        self.wgt = rng.standard_normal((2, 3, 3, 3))

    def test_input_gradient(self):
        self.conv.forward(self.x)
        analytic = self.conv.backward(self.wgt)
        err = check_gradient(weighted_sum_loss(lambda: self.conv.forward(self.x), self.wgt),
                             self.x, analytic)
        assert err < TOLERANCE

    def test_weight_gradient(self):
        self.conv.forward(self.x)
        self.conv.backward(self.wgt)
        err = check_gradient(weighted_sum_loss(lambda: self.conv.forward(self.x), self.wgt),
                             self.conv.weights, self.conv.grad_weights)
        assert err < TOLERANCE

    def test_bias_gradient(self):
        self.conv.forward(self.x)
        self.conv.backward(self.wgt)
        err = check_gradient(weighted_sum_loss(lambda: self.conv.forward(self.x), self.wgt),
                             self.conv.bias, self.conv.grad_bias)
        assert err < TOLERANCE


class TestPoolAndReluGradients:
    def test_maxpool(self):
        rng = np.random.default_rng(102)
        x = spread_values(rng, (1, 2, 6, 6))
        pool = layers.MaxPool2d(kernel=3, stride=2)
        wgt = rng.standard_normal((1, 2, 2, 2))
        pool.forward(x)
        analytic = pool.backward(wgt)
        err = check_gradient(weighted_sum_loss(lambda: pool.forward(x), wgt), x, analytic)
        assert err < TOLERANCE

    def test_relu(self):
        rng = np.random.default_rng(103)
        x = spread_values(rng, (3, 7))
        relu = layers.ReLU()
        wgt = rng.standard_normal((3, 7))
        relu.forward(x)
        analytic = relu.backward(wgt)
        err = check_gradient(weighted_sum_loss(lambda: relu.forward(x), wgt), x, analytic)
        assert err < TOLERANCE


class TestLrnGradient:
    def test_input_gradient(self):
        rng = np.random.default_rng(104)
        x = rng.standard_normal((2, 6, 2, 2))
        lrn = layers.Lrn()
        wgt = rng.standard_normal(x.shape)
        lrn.forward(x)
        analytic = lrn.backward(wgt)
        err = check_gradient(weighted_sum_loss(lambda: lrn.forward(x), wgt), x, analytic)
        assert err < TOLERANCE

    def test_input_gradient_few_channels(self):
        # window clipped on both sides
        rng = np.random.default_rng(105)
        x = rng.standard_normal((1, 3, 3, 3))
        lrn = layers.Lrn()
        wgt = rng.standard_normal(x.shape)
        lrn.forward(x)
        analytic = lrn.backward(wgt)
        err = check_gradient(weighted_sum_loss(lambda: lrn.forward(x), wgt), x, analytic)
        assert err < TOLERANCE


class TestFullyConnectedGradients:
    def setup_method(self):
        rng = np.random.default_rng(106)
        self.x = rng.standard_normal((3, 4))
        self.fc = layers.FullyConnected(4, 5, rng=rng, dtype=np.float64)
        self.wgt = rng.standard_normal((3, 5))

    def test_all_gradients(self):
        self.fc.forward(self.x)
        analytic_dx = self.fc.backward(self.wgt)
        fn = weighted_sum_loss(lambda: self.fc.forward(self.x), self.wgt)
        assert check_gradient(fn, self.x, analytic_dx) < TOLERANCE
        assert check_gradient(fn, self.fc.weights, self.fc.grad_weights) < TOLERANCE
        assert check_gradient(fn, self.fc.bias, self.fc.grad_bias) < TOLERANCE


class TestDropoutGradient:
    def test_frozen_mask_gradient(self):
        x = np.random.default_rng(107).standard_normal((4, 6))
        drop = layers.Dropout(0.5)
        wgt = np.random.default_rng(108).standard_normal((4, 6))

        def forward():
            # same seed every call -> identical mask, a deterministic linear map
            return drop.forward(x, mode="train", rng=np.random.default_rng(999))

        forward()
        analytic = drop.backward(wgt)
        err = check_gradient(weighted_sum_loss(forward, wgt), x, analytic)
        assert err < TOLERANCE


class TestSoftmaxLossGradient:
    def test_logit_gradient(self):
        rng = np.random.default_rng(109)
        logits = rng.standard_normal((4, 6))
        labels = np.array([0, 2, 5, 3])
        loss_layer = layers.SoftmaxLogLoss()

        def fn():
            return loss_layer.forward(logits, labels)[1]

        fn()
        analytic = loss_layer.backward()
        assert check_gradient(fn, logits, analytic) < TOLERANCE


class TestStackedGradient:
    """Composition check: conv -> relu -> pool -> fc -> softmax loss."""

    def test_end_to_end_input_gradient(self):
        rng = np.random.default_rng(110)
        x = spread_values(rng, (2, 1, 7, 7), step=0.05)
        conv = layers.Conv2d(1, 2, kernel=3, rng=rng, dtype=np.float64, init_std=0.5)
        relu = layers.ReLU()
        pool = layers.MaxPool2d(kernel=3, stride=2)
        fc = layers.FullyConnected(2 * 2 * 2, 3, rng=rng, dtype=np.float64, init_std=0.5)
        loss_layer = layers.SoftmaxLogLoss()
        labels = np.array([0, 2])

        def fn():
            h = pool.forward(relu.forward(conv.forward(x)))
            h = h.reshape(h.shape[0], -1)
            return loss_layer.forward(fc.forward(h), labels)[1]

        fn()
        g = fc.backward(loss_layer.backward())
        g = pool.backward(g.reshape(2, 2, 2, 2))
        analytic = conv.backward(relu.backward(g))
        assert check_gradient(fn, x, analytic) < TOLERANCE

    def test_end_to_end_weight_gradient(self):
        rng = np.random.default_rng(111)
        x = rng.standard_normal((2, 2, 5, 5))
        conv = layers.Conv2d(2, 3, kernel=3, pad=1, rng=rng, dtype=np.float64, init_std=0.5)
        lrn = layers.Lrn()
        fc = layers.FullyConnected(3 * 5 * 5, 4, rng=rng, dtype=np.float64, init_std=0.5)
        loss_layer = layers.SoftmaxLogLoss()
        labels = np.array([1, 3])

        def fn():
            h = lrn.forward(conv.forward(x))
            return loss_layer.forward(fc.forward(h.reshape(2, -1)), labels)[1]

        fn()
        g = fc.backward(loss_layer.backward())
        conv.backward(lrn.backward(g.reshape(2, 3, 5, 5)))
        assert check_gradient(fn, conv.weights, conv.grad_weights) < TOLERANCE
        assert check_gradient(fn, fc.weights, fc.grad_weights) < TOLERANCE
