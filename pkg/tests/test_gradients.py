"""Finite-difference validation of every backward pass.

All checks run in float64 with central differences (step 1e-4) and must land
inside 1e-4 relative error; relu/maxpool inputs are constructed to stay away
from their kink points so the numeric derivative is well defined.
"""

import numpy as np
import pytest

from pitchdet.tensor import (
    Tape,
    Tensor,
    add,
    batchnorm,
    conv2d,
    grad_check,
    maxpool2x2,
    nearest_upsample2x,
    relu,
    scale,
    sigmoid,
    sum_all,
)

TOL = 1e-4


def assert_grad_ok(f, x, **kw):
    report = grad_check(f, x, tolerance=TOL, **kw)
    assert report.passed, f"max rel error {report.max_rel_error:.3e} over {report.coords_checked} coords"


class TestConvGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_conv3x3_wrt_input_weights_bias(self, seed):
        rng = np.random.default_rng(1000 + seed)
        n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        x = Tensor(rng.normal(size=(n, c, h, w)))
        wt = Tensor(rng.normal(size=(o, c, 3, 3)))
        b = Tensor(rng.normal(size=o))
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(t, wt, b))), x)
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(x, t, b))), wt)
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(x, wt, t))), b)

    @pytest.mark.parametrize("seed", range(7))
    def test_conv1x1_wrt_input_weights_bias(self, seed):
        rng = np.random.default_rng(2000 + seed)
        n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x = Tensor(rng.normal(size=(n, c, h, w)))
        wt = Tensor(rng.normal(size=(o, c, 1, 1)))
        b = Tensor(rng.normal(size=o))
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(t, wt, b))), x)
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(x, t, b))), wt)
        assert_grad_ok(lambda t: sum_all(sigmoid(conv2d(x, wt, t))), b)


class TestPoolGradients:
    @pytest.mark.parametrize("seed", range(8))
    def test_maxpool_with_separated_values(self, seed):
        rng = np.random.default_rng(3000 + seed)
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
        # distinct values with gaps >> FD step so the argmax never flips
        vals = rng.permutation(n * c * h * w).astype(np.float64) * 0.01
        x = Tensor(vals.reshape(n, c, h, w))
        assert_grad_ok(lambda t: sum_all(sigmoid(maxpool2x2(t))), x)


class TestBatchnormGradients:
    @staticmethod
    def _params(c, rng):
        g = Tensor(rng.uniform(0.5, 1.5, size=c))
        b = Tensor(rng.normal(size=c))
        rm = Tensor(rng.normal(size=c) * 0.1)
        rv = Tensor(rng.uniform(0.5, 2.0, size=c))
        return g, b, rm, rv

    def test_train_mode_reference_shape(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        g, b, rm, rv = self._params(3, rng)
        assert_grad_ok(lambda t: sum_all(sigmoid(batchnorm(t, g, b, rm, rv, "train"))), x)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    @pytest.mark.parametrize("seed", range(4))
    def test_both_modes_wrt_all_inputs(self, mode, seed):
        rng = np.random.default_rng(4000 + seed)
        n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x = Tensor(rng.normal(size=(n, c, h, w)))
        g, b, rm, rv = self._params(c, rng)
        assert_grad_ok(lambda t: sum_all(sigmoid(batchnorm(t, g, b, rm, rv, mode))), x)
        assert_grad_ok(lambda t: sum_all(sigmoid(batchnorm(x, t, b, rm, rv, mode))), g)
        assert_grad_ok(lambda t: sum_all(sigmoid(batchnorm(x, g, t, rm, rv, mode))), b)


class TestElementwiseGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_relu_away_from_kinks(self, seed):
        rng = np.random.default_rng(5000 + seed)
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        x = rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        assert_grad_ok(lambda t: sum_all(sigmoid(relu(t))), Tensor(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_sigmoid(self, seed):
        rng = np.random.default_rng(6000 + seed)
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        assert_grad_ok(lambda t: sum_all(sigmoid(t)), Tensor(rng.normal(size=shape)))

    @pytest.mark.parametrize("seed", range(4))
    def test_upsample(self, seed):
        rng = np.random.default_rng(7000 + seed)
        shape = (1, int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        assert_grad_ok(lambda t: sum_all(sigmoid(nearest_upsample2x(t))), Tensor(rng.normal(size=shape)))

    @pytest.mark.parametrize("seed", range(4))
    def test_add_and_scale(self, seed):
        rng = np.random.default_rng(8000 + seed)
        shape = (1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        other = Tensor(rng.normal(size=shape))
        assert_grad_ok(lambda t: sum_all(sigmoid(add(t, other))), Tensor(rng.normal(size=shape)))
        assert_grad_ok(lambda t: sum_all(sigmoid(scale(t, -1.7))), Tensor(rng.normal(size=shape)))


class TestCompositionGradient:
    def test_mini_pyramid_stack(self, rng):
        """conv+BN+relu -> pool -> conv+BN+relu -> upsample, added to a 1x1
        lateral of the earlier map: the same wiring pattern the detector uses."""
        x = Tensor(rng.normal(size=(1, 3, 8, 8)))
        w1 = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        b1 = Tensor(rng.normal(size=4) * 0.1)
        g1, be1 = Tensor(np.ones(4)), Tensor(np.zeros(4))
        rm1, rv1 = Tensor(np.zeros(4)), Tensor(np.ones(4))
        w2 = Tensor(rng.normal(size=(4, 4, 3, 3)) * 0.5)
        b2 = Tensor(rng.normal(size=4) * 0.1)
        g2, be2 = Tensor(np.ones(4)), Tensor(np.zeros(4))
        rm2, rv2 = Tensor(np.zeros(4)), Tensor(np.ones(4))
        wl = Tensor(rng.normal(size=(4, 4, 1, 1)) * 0.5)
        bl = Tensor(rng.normal(size=4) * 0.1)

        def net(t):
            c1 = relu(batchnorm(conv2d(t, w1, b1), g1, be1, rm1, rv1, "train"))
            c2 = relu(batchnorm(conv2d(maxpool2x2(c1), w2, b2), g2, be2, rm2, rv2, "train"))
            fused = add(nearest_upsample2x(c2), conv2d(c1, wl, bl))
            return sum_all(sigmoid(fused))

        assert_grad_ok(net, x)
        # grad_check perturbs the target tensor's storage in place, so the
        # closure can ignore its argument and reread the captured parameter
        for param in (w1, b1, g1, be1, w2, b2, g2, be2, wl, bl):
            assert_grad_ok(lambda _t: net(x), param)
