"""Forward-pass behavior of the tensor engine ops."""

import threading

import numpy as np
import pytest

from pitchdet.tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    batchnorm,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    maxpool2x2,
    nearest_upsample2x,
    relu,
    scale,
    sigmoid,
    sum_all,
)

from oracles import naive_conv2d, naive_maxpool2x2


def identity_kernel(channels):
    w = np.zeros((channels, channels, 3, 3))
    for i in range(channels):
        w[i, i, 1, 1] = 1.0
    return w


class TestConv2d:
    def test_identity_kernel_reproduces_input(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        out = conv2d(x, Tensor(identity_kernel(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_all_ones_kernel_padded_sums(self):
        x = Tensor(np.full((1, 1, 6, 6), 5.0))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data[0, 0, 2, 2] == 45.0  # interior: 9 cells in view
        assert out.data[0, 0, 0, 0] == 20.0  # corner: 4 cells in view
        assert out.data[0, 0, 0, 3] == 30.0  # edge: 6 cells in view

    def test_matches_naive_oracle_reference_shape(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = conv2d_forward(x, w, b)
        want = naive_conv2d(x, w, b)
        rel = np.abs(got - want).max() / np.abs(want).max()
        assert rel < 1e-6

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(300 + seed)
        n, c, o = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(1, 8), rng.integers(1, 8)
        k = int(rng.choice([1, 3]))
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(o, c, k, k))
        b = rng.normal(size=o)
        got = conv2d_forward(x, wt, b)
        want = naive_conv2d(x, wt, b)
        rel = np.abs(got - want).max() / max(np.abs(want).max(), 1e-12)
        assert rel < 1e-6, f"shape n={n} c={c} o={o} h={h} w={w} k={k}: rel={rel:.2e}"

    def test_large_input_chunked_path_matches_single_shot(self, rng):
        # force the row-chunked im2col path and compare against the direct GEMM;
        # float64 BLAS is order-stable here, float32 may differ by an ulp
        from pitchdet import tensor as T

        x = rng.normal(size=(1, 4, 40, 33))
        w = rng.normal(size=(6, 4, 3, 3))
        b = rng.normal(size=6)
        full = conv2d_forward(x, w, b)
        saved = T._PATCH_BYTES_BUDGET
        try:
            T._PATCH_BYTES_BUDGET = 4 * 9 * 33 * 8 * 3  # ~3 rows per chunk
            chunked = conv2d_forward(x, w, b)
            f32 = conv2d_forward(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
        finally:
            T._PATCH_BYTES_BUDGET = saved
        assert np.array_equal(full, chunked)
        assert np.allclose(f32, full, atol=1e-4)

    def test_shape_errors_name_offender(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(rng.normal(size=(2, 5, 3, 3))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(7)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(rng.normal(size=(2, 3, 5, 5))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(2)))

    def test_inputs_not_mutated(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        snap = (x.data.copy(), w.data.copy(), b.data.copy())
        conv2d(x, w, b)
        assert np.array_equal(x.data, snap[0])
        assert np.array_equal(w.data, snap[1])
        assert np.array_equal(b.data, snap[2])

    def test_dtype_preserved(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        assert conv2d(x, w, b).dtype == np.float32


class TestConv2dBackward:
    def test_identity_kernel_passes_gradient_through(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = identity_kernel(3)
        go = rng.normal(size=(2, 3, 6, 6))
        gx, gw, gb = conv2d_backward(go, x, w)
        assert np.allclose(gx, go, atol=0, rtol=0)

    def test_bias_gradient_is_output_grad_sum(self, rng):
        x = np.full((2, 2, 5, 5), 3.0)
        w = rng.normal(size=(4, 2, 3, 3))
        go = rng.normal(size=(2, 4, 5, 5))
        _, _, gb = conv2d_backward(go, x, w)
        assert np.allclose(gb, go.sum(axis=(0, 2, 3)), rtol=1e-12)

    def test_skips_input_grad_when_not_needed(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        go = rng.normal(size=(1, 2, 4, 4))
        gx, gw, gb = conv2d_backward(go, x, w, need_input_grad=False)
        assert gx is None and gw.shape == w.shape


class TestMaxpool:
    def test_block_max(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2x2(x).data[0, 0, 0, 0] == 4.0

    def test_matches_per_block_oracle(self, rng):
        x = rng.normal(size=(1, 1, 6, 6))
        got = maxpool2x2(Tensor(x)).data
        assert np.array_equal(got, naive_maxpool2x2(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(60 + seed)
        n, c = rng.integers(1, 4), rng.integers(1, 5)
        h, w = 2 * rng.integers(1, 6), 2 * rng.integers(1, 6)
        x = rng.normal(size=(n, c, h, w))
        assert np.array_equal(maxpool2x2(Tensor(x)).data, naive_maxpool2x2(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2x2(Tensor(np.zeros((1, 1, 5, 4))))

    def test_tie_routes_gradient_to_first_row_major(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(maxpool2x2(x))
            tape.backward(loss)
        want = np.zeros((1, 1, 4, 4))
        want[0, 0, 0::2, 0::2] = 1.0  # top-left of every 2x2 block
        assert np.array_equal(x.grad, want)


class TestBatchnorm:
    @staticmethod
    def _stats_tensors(c, mean=0.0, var=1.0, gamma=1.0, beta=0.0):
        return (
            Tensor(np.full(c, gamma), requires_grad=True),
            Tensor(np.full(c, beta), requires_grad=True),
            Tensor(np.full(c, mean)),
            Tensor(np.full(c, var)),
        )

    def test_standardized_input_passes_through_in_train_mode(self, rng):
        x = rng.uniform(-1.0, 1.0, size=(4, 3, 6, 6))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        g, b, rm, rv = self._stats_tensors(3)
        out = batchnorm(Tensor(x), g, b, rm, rv, mode="train")
        assert np.allclose(out.data, x, atol=1e-5)

    def test_eval_mode_is_affine_in_running_stats(self, rng):
        x = rng.uniform(-1.0, 1.0, size=(2, 2, 4, 4))
        g, b, rm, rv = self._stats_tensors(2, mean=0.0, var=1.0, gamma=2.0, beta=3.0)
        out = batchnorm(Tensor(x), g, b, rm, rv, mode="eval")
        assert np.allclose(out.data, 2.0 * x + 3.0, atol=1e-4)
        # eval mode must not touch the running buffers
        assert np.array_equal(rm.data, np.zeros(2))
        assert np.array_equal(rv.data, np.ones(2))

    def test_train_mode_updates_running_stats_with_momentum(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 5, 5))
        g, b, rm, rv = self._stats_tensors(2, mean=1.0, var=4.0)
        batchnorm(Tensor(x), g, b, rm, rv, mode="train", momentum=0.1)
        bm = x.mean(axis=(0, 2, 3))
        bv = x.var(axis=(0, 2, 3))
        assert np.allclose(rm.data, 0.9 * 1.0 + 0.1 * bm, rtol=1e-12)
        assert np.allclose(rv.data, 0.9 * 4.0 + 0.1 * bv, rtol=1e-12)

    def test_train_mode_output_is_standardized(self, rng):
        x = rng.normal(5.0, 2.5, size=(3, 4, 6, 6))
        g, b, rm, rv = self._stats_tensors(4)
        out = batchnorm(Tensor(x), g, b, rm, rv, mode="train")
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_channel_mismatch_and_bad_mode(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        g, b, rm, rv = self._stats_tensors(2)
        with pytest.raises(ShapeError):
            batchnorm(x, g, b, rm, rv, mode="train")
        g3, b3, rm3, rv3 = self._stats_tensors(3)
        with pytest.raises(ValueError):
            batchnorm(x, g3, b3, rm3, rv3, mode="test")


class TestActivationsAndStructuralOps:
    def test_sigmoid_midpoint(self):
        assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data[0, 0, 0, 0] == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            lo = sigmoid(Tensor(np.full((1, 1, 1, 1), -1000.0)))
            hi = sigmoid(Tensor(np.full((1, 1, 1, 1), 1000.0)))
        assert lo.data[0, 0, 0, 0] == 0.0
        assert hi.data[0, 0, 0, 0] == 1.0

    def test_relu_clamps_negatives(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        out = relu(Tensor(x))
        assert np.array_equal(out.data, np.maximum(x, 0))

    def test_upsample_replicates_blocks(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = nearest_upsample2x(x).data[0, 0]
        want = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float
        )
        assert np.array_equal(out, want)

    def test_add_requires_identical_shapes(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor(rng.normal(size=(1, 2, 4, 2)))
        with pytest.raises(ShapeError):
            add(a, b)

    def test_scale_and_sum_all(self, rng):
        x = rng.normal(size=(2, 1, 3, 3))
        assert np.allclose(scale(Tensor(x), -2.5).data, -2.5 * x)
        assert sum_all(Tensor(x)).item() == pytest.approx(x.sum(), rel=1e-12)


class TestTape:
    def test_ops_outside_tape_record_nothing(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        tape = Tape()
        relu(x)  # tape not entered: forward-only
        assert len(tape) == 0
        with tape:
            relu(x)
        assert len(tape) == 1

    def test_backward_on_empty_tape_raises(self):
        with pytest.raises(TapeError):
            Tape().backward(Tensor(np.zeros(())))

    def test_backward_needs_scalar_loss(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_multi_consumer_gradients_accumulate(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        with Tape() as tape:
            y = add(scale(x, 2.0), scale(x, 3.0))
            tape.backward(sum_all(y))
        assert np.allclose(x.grad, np.full((1, 1, 3, 3), 5.0))

    def test_same_tensor_twice_in_add(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward(sum_all(add(x, x)))
        assert np.allclose(x.grad, np.full((1, 1, 2, 2), 2.0))

    def test_tapes_are_thread_confined(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        worker_grad = {}

        def worker():
            xt = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
            with Tape() as t:
                t.backward(sum_all(scale(xt, 4.0)))
            worker_grad["g"] = xt.grad

        with Tape() as tape:
            relu(x)
            th = threading.Thread(target=worker)
            th.start()
            th.join()
            assert len(tape) == 1  # worker ops never landed on this tape
        assert np.allclose(worker_grad["g"], 4.0)

    def test_no_silent_nan_on_finite_inputs(self, rng):
        # one pass through every op with extreme-but-finite values
        x = Tensor(rng.normal(scale=50.0, size=(2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(scale=5.0, size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        g, bt = Tensor(np.ones(4), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)
        rm, rv = Tensor(np.zeros(4)), Tensor(np.ones(4))
        with Tape() as tape:
            y = conv2d(x, w, b)
            y = batchnorm(y, g, bt, rm, rv, mode="train")
            y = relu(y)
            y = maxpool2x2(y)
            y = sigmoid(nearest_upsample2x(y))
            loss = sum_all(y)
            tape.backward(loss)
        assert np.isfinite(loss.item())
        for t in (x, w, b, g, bt):
            assert np.all(np.isfinite(t.grad))


class TestGradCheckHarness:
    def test_sum_is_exact(self, rng):
        # integer data + power-of-two step keep the finite differences exact,
        # so the all-ones analytic gradient is matched with error 0
        x = Tensor(rng.integers(-8, 8, size=(1, 1, 3, 3)).astype(np.float64))
        report = grad_check(sum_all, x, step=0.25)
        assert report.passed and report.max_rel_error == 0.0
        loose = grad_check(sum_all, Tensor(rng.normal(size=(1, 1, 3, 3))))
        assert loose.passed and loose.max_rel_error < 1e-10

    def test_relu_sum_away_from_kinks(self, rng):
        x = rng.uniform(0.2, 1.0, size=(1, 2, 3, 3)) * rng.choice([-1.0, 1.0], size=(1, 2, 3, 3))
        report = grad_check(lambda t: sum_all(relu(t)), Tensor(x))
        assert report.passed and report.max_rel_error < 1e-10

    def test_subsampling_limits_coordinates(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        report = grad_check(lambda t: sum_all(sigmoid(t)), x, max_coords=7)
        assert report.coords_checked == 7
        assert report.passed
