import math

import numpy as np
import pytest

from gfflab.core import (
    RunningStats, Tensor, add, avg_pool_adaptive, batch_norm, bilinear_resample, concat_channels, conv2d,
    gradcheck, mul, precision, relu, sigmoid, slice_channels, softmax_cross_entropy,
)
from gfflab.core import ops
from gfflab.core.tensor import make_result, walk_graph
from gfflab.checks import op_gradchecks


def T(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


def img(*vals):
    """Pack a 1-D list into a [1, len, 1, 1] map (one pixel, many channels)."""
    return T(np.asarray(vals, dtype=np.float64).reshape(1, -1, 1, 1))


class TestElementwise:
    def test_add_values(self):
        np.testing.assert_array_equal(add(T([1.0, 2.0]), T([3.0, 4.0])).data, [4.0, 6.0])

    def test_add_zero_identity(self):
        x = T(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
        np.testing.assert_array_equal((x + T(np.zeros(x.shape))).data, x.data)

    def test_mul_gate_broadcast(self):
        gate = T(np.full((1, 1, 1, 1), 0.5))
        out = mul(gate, img(2.0, 4.0))
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0])

    def test_mul_ones_identity(self):
        x = T(np.random.default_rng(1).standard_normal((2, 3, 4, 4)))
        np.testing.assert_array_equal((x * T(np.ones(x.shape))).data, x.data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            add(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError):
            mul(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 1, 2, 3))))

    def test_broadcast_gradient_sums_over_channels(self):
        with precision("bits64"):
            g = T(np.zeros((1, 1, 2, 2)), requires_grad=True)
            x = T(np.arange(12.0).reshape(1, 3, 2, 2), requires_grad=True)
            (g * x).sum().backward()
            np.testing.assert_array_equal(g.grad[0, 0], x.data[0].sum(0))

    def test_sigmoid_values(self):
        assert sigmoid(T([0.0])).data[0] == 0.5
        assert sigmoid(T([1.0])).data[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
        assert sigmoid(T([1.0])).data[0] == pytest.approx(0.731058, abs=1e-6)
        big = sigmoid(T([-800.0, 800.0])).data
        assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0

    def test_relu_values_and_kink(self):
        np.testing.assert_array_equal(relu(T([-3.0, 3.0])).data, [0.0, 3.0])
        x = T([0.0, -1.0, 2.0], requires_grad=True)
        relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestConv:
    def test_pointwise_weighted_sum(self):
        x = img(3.0, 4.0)
        w = T(np.ones((1, 2, 1, 1)))
        assert conv2d(x, w, T([0.0])).data.item() == 7.0

    def test_all_ones_3x3(self):
        out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), None, 1, 1, 1).data[0, 0]
        assert out[1, 1] == 9.0 and out[0, 0] == 4.0

    def test_identity_kernel(self):
        x = T(np.random.default_rng(2).standard_normal((2, 1, 5, 6)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, T(k), None, 1, 1, 1).data, x.data)

    @pytest.mark.parametrize("h,k,s,p,d", [(7, 3, 1, 1, 1), (7, 3, 2, 1, 1), (9, 3, 1, 2, 2), (8, 1, 2, 0, 1)])
    def test_output_extent(self, h, k, s, p, d):
        x = T(np.zeros((1, 1, h, h)))
        out = conv2d(x, T(np.zeros((2, 1, k, k))), None, s, p, d)
        assert out.shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError):
            conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 5, 5))), None, 1, 1, 1)


class TestResamplePool:
    def test_same_size_is_exact_copy(self):
        x = T(np.random.default_rng(3).standard_normal((2, 3, 5, 7)))
        np.testing.assert_array_equal(bilinear_resample(x, 5, 7).data, x.data)

    def test_constant_from_single_pixel(self):
        out = bilinear_resample(T(np.full((1, 1, 1, 1), 2.5)), 4, 3).data
        np.testing.assert_array_equal(out, np.full((1, 1, 4, 3), 2.5))

    def test_row_upsample_half_pixel(self):
        out = bilinear_resample(T(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)), 1, 4).data
        np.testing.assert_allclose(out.reshape(-1), [0.0, 0.25, 0.75, 1.0], atol=1e-15)

    def test_pool_mean(self):
        x = T(np.array([[1.0, 2.0], [3.0, 5.0]]).reshape(1, 1, 2, 2))
        assert avg_pool_adaptive(x, 1, 1).data.item() == 2.75

    def test_pool_identity_and_constant(self):
        x = T(np.random.default_rng(4).standard_normal((1, 2, 4, 5)))
        np.testing.assert_array_equal(avg_pool_adaptive(x, 4, 5).data, x.data)
        c = avg_pool_adaptive(T(np.full((1, 1, 7, 7), 3.0)), 3, 2).data
        np.testing.assert_allclose(c, 3.0, rtol=1e-15)

    def test_pool_bin_too_large(self):
        with pytest.raises(ValueError):
            avg_pool_adaptive(T(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_pool_partitions_cover_input(self):
        for n in range(1, 20):
            for b in range(1, n + 1):
                bounds = ops.pool_bounds(n, b)
                cells = [i for s, e in bounds for i in range(s, e)]
                assert cells == list(range(n))


class TestBatchNorm:
    def test_constant_input_gives_zero(self):
        st = RunningStats.fresh(2, np.float64)
        out = batch_norm(T(np.full((2, 2, 3, 3), 7.0)), T(np.ones(2)), T(np.zeros(2)), st, True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_values(self):
        st = RunningStats.fresh(1, np.float64)
        x = T(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = batch_norm(x, T(np.ones(1)), T(np.zeros(1)), st, True).data.reshape(-1)
        expect = 1 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out, [-expect, expect], rtol=1e-12)
        assert out[1] == pytest.approx(0.999995, abs=1e-6)

    def test_running_stats_update(self):
        st = RunningStats.fresh(1, np.float64)
        x = T(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        batch_norm(x, T(np.ones(1)), T(np.zeros(1)), st, True)
        assert st.mean[0] == pytest.approx(0.2)
        # unbiased batch variance is 2
        assert st.var[0] == pytest.approx(0.9 + 0.1 * 2.0)

    def test_eval_uses_running_stats(self):
        st = RunningStats(np.array([1.0]), np.array([4.0]))
        x = T(np.array([5.0]).reshape(1, 1, 1, 1))
        out = batch_norm(x, T(np.ones(1)), T(np.zeros(1)), st, False).data.item()
        assert out == pytest.approx(4.0 / math.sqrt(4.0 + 1e-5), rel=1e-12)

    def test_single_element_training_rejected(self):
        with pytest.raises(ValueError):
            batch_norm(T(np.ones((1, 1, 1, 1))), T(np.ones(1)), T(np.zeros(1)),
                       RunningStats.fresh(1, np.float64), True)


class TestConcatSoftmax:
    def test_concat_then_slice_round_trip(self):
        rng = np.random.default_rng(5)
        a, b = T(rng.standard_normal((2, 2, 3, 3))), T(rng.standard_normal((2, 3, 3, 3)))
        c = concat_channels([a, b])
        assert c.shape[1] == 5
        np.testing.assert_array_equal(slice_channels(c, 0, 2).data, a.data)
        np.testing.assert_array_equal(slice_channels(c, 2, 5).data, b.data)
        np.testing.assert_array_equal(concat_channels([a]).data, a.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ValueError):
            concat_channels([T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 2)))])

    def test_cross_entropy_closed_forms(self):
        z = T(np.zeros((1, 2, 1, 1)))
        assert softmax_cross_entropy(z, np.zeros((1, 1, 1), int)).item() == pytest.approx(math.log(2), abs=1e-15)
        z = T(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
        val = softmax_cross_entropy(z, np.zeros((1, 1, 1), int)).item()
        assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
        assert val == pytest.approx(0.313262, abs=1e-6)

    def test_cross_entropy_masking(self):
        z = np.zeros((1, 3, 2, 2))
        z[0, 1, 0, 0] = 60.0
        labels = np.full((1, 2, 2), 255)
        labels[0, 0, 0] = 1
        assert softmax_cross_entropy(T(z), labels).item() < 1e-20

    def test_cross_entropy_all_ignored(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(T(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255))

    def test_cross_entropy_shift_invariance(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal((2, 4, 3, 3))
        y = rng.integers(0, 4, (2, 3, 3))
        shift = rng.standard_normal((2, 1, 3, 3)) * 50
        a = softmax_cross_entropy(T(z), y).item()
        b = softmax_cross_entropy(T(z + shift), y).item()
        assert abs(a - b) < 1e-10


class TestAutodiff:
    def test_op_gradchecks(self):
        errs = op_gradchecks(seed=3)
        bad = {k: v for k, v in errs.items() if not v < 1e-4}
        assert not bad, bad

    def test_linear_function_machine_precision(self):
        with precision("bits64"):
            x = T(np.random.default_rng(7).standard_normal((2, 3, 2, 2)))
            assert gradcheck(lambda t: t * 3.0 + 1.0, [x]) < 1e-9

    def test_corrupted_backward_is_caught(self):
        def bad_square(t):
            return make_result(t.data ** 2, [t], lambda g: (g * 3.0 * t.data,), "bad_square")

        with precision("bits64"):
            x = T(np.random.default_rng(8).uniform(0.5, 1.5, (1, 1, 2, 2)))
            assert gradcheck(bad_square, [x]) > 1e-2

    def test_gradcheck_needs_64_bit(self):
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            gradcheck(sigmoid, [x])

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(9)
        xd, wd = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
        grads = []
        for _ in range(2):
            x, w = T(xd, requires_grad=True), T(wd, requires_grad=True)
            y = sigmoid(conv2d(x, w, None, 1, 1, 1))
            (y * y).sum().backward()
            grads.append((x.grad.copy(), w.grad.copy()))
        for a, b in zip(*grads):
            assert a.tobytes() == b.tobytes()

    def test_graph_is_in_insertion_order(self):
        x = T(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = relu(sigmoid(x) * 2.0 + x)
        seqs = [n.seq for n in walk_graph(y)]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)

    def test_shared_input_accumulates(self):
        x = T([2.0], requires_grad=True)
        (x * x + x).sum().backward()
        assert x.grad[0] == 5.0

    def test_non_finite_forward_raises(self):
        with pytest.raises(FloatingPointError):
            T([np.inf]) * 1.0

    def test_mixed_precision_rejected(self):
        with pytest.raises(TypeError):
            Tensor(np.zeros(2, np.float32)) + Tensor(np.zeros(2, np.float64))

    def test_threaded_conv_is_reproducible(self):
        rng = np.random.default_rng(10)
        x = T(rng.standard_normal((4, 3, 8, 8)), requires_grad=True)
        w = T(rng.standard_normal((5, 3, 3, 3)), requires_grad=True)
        results = []
        for n in (1, 3, 3):
            ops.set_num_threads(n)
            try:
                x.grad = w.grad = None
                y = conv2d(x, w, None, 1, 1, 1)
                (y * y).sum().backward()
                results.append((y.data.copy(), x.grad.copy(), w.grad.copy()))
            finally:
                ops.set_num_threads(1)
        serial, first, second = results
        for a, b in zip(first, second):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(serial, first):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
