import numpy as np
import pytest

from lcfed import tensor as T
from lcfed.tensor import Tensor

from gradcheck import assert_grads_close, numeric_grad, rel_err


def conv2d_loop(x, kernels, bias=None, stride=1, padding=None):
    """Naive nested-loop cross-correlation oracle."""
    b, cin, h, w = x.shape
    cout, _, k, _ = kernels.shape
    pad = k // 2 if padding is None else padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, c, i * stride + di, j * stride + dj] * kernels[o, c, di, dj]
                    out[bi, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


class TestElementwise:
    def test_mul_broadcast_scalar_like(self):
        out = Tensor([1.0, 2.0, 3.0]) * Tensor([2.0, 2.0, 2.0])
        np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])

    def test_add_identity(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        out = x + Tensor(np.zeros((2, 3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_grad_of_sum_mul_equals_other_factor(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(8)
        b = rng.standard_normal(8)
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        (ta * tb).sum().backward()
        np.testing.assert_allclose(ta.grad, b, rtol=0, atol=0)
        # independent finite-difference cross-check
        ng = numeric_grad(lambda a_, b_: float((a_ * b_).sum()), [a, b], 0)
        assert rel_err(ta.grad, ng) < 1e-6

    def test_sub_and_neg_grads(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        out = (ta - tb) * Tensor(2.0)
        (-out).sum().backward()
        np.testing.assert_allclose(ta.grad, -2 * np.ones_like(a))
        np.testing.assert_allclose(tb.grad, 2 * np.ones_like(b))

    def test_channel_gate_broadcast(self):
        # (B, C, 1, 1) gate against (B, C, H, W) feature, the shape PCS uses
        rng = np.random.default_rng(2)
        f = rng.standard_normal((2, 3, 4, 4))
        gate = rng.random((2, 3))
        tf = Tensor(f, requires_grad=True)
        tg = Tensor(gate, requires_grad=True)
        out = tf * tg.reshape(2, 3, 1, 1)
        assert out.shape == (2, 3, 4, 4)
        out.sum().backward()
        np.testing.assert_allclose(tg.grad, f.sum(axis=(2, 3)), rtol=1e-12)
        np.testing.assert_allclose(tf.grad, np.broadcast_to(gate[:, :, None, None], f.shape))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))


class TestMatmul:
    def test_one_hot_row_selects_weight_row(self):
        out = T.linear(Tensor([[1.0, 0.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]),
                       Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_identity_weight(self):
        x = np.random.default_rng(3).standard_normal((4, 5))
        out = T.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, x)

    def test_weight_grad_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)

        tx, tw, tb = (Tensor(a, requires_grad=True) for a in (x, w, b))
        T.linear(tx, tw, tb).sum().backward()

        def f(x_, w_, b_):
            return float((x_ @ w_ + b_).sum())

        assert_grads_close(f, [x, w, b], [tx.grad, tw.grad, tb.grad])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestConv2d:
    def test_1x1_unit_kernel_is_identity(self):
        x = np.random.default_rng(5).standard_normal((1, 1, 6, 6))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_allclose(out.data, x)

    def test_averaging_kernel_on_constant_image(self):
        x = np.full((1, 1, 8, 8), 3.5)
        k = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = T.conv2d(Tensor(x), Tensor(k))
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 3.5)

    def test_forward_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b), rtol=1e-12)

    def test_strided_forward_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 7, 7))
        k = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=2)
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, stride=2), rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        tx, tk, tb = (Tensor(a, requires_grad=True) for a in (x, k, b))
        T.conv2d(tx, tk, tb).sum().backward()

        def f(x_, k_, b_):
            return float(conv2d_loop(x_, k_, b_).sum())

        assert_grads_close(f, [x, k, b], [tx.grad, tk.grad, tb.grad])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestReductionsAndActivations:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_strictly_in_unit_interval(self):
        x = np.linspace(-50, 50, 101)
        out = T.sigmoid(Tensor(x)).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_global_average_pool_constant(self):
        x = np.full((2, 3, 4, 4), 1.25)
        out = T.global_average_pool(Tensor(x))
        np.testing.assert_allclose(out.data, np.full((2, 3), 1.25))

    def test_abs_backward_away_from_kink(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(12)
        x = x[np.abs(x) > 1e-3][:8]
        tx = Tensor(x, requires_grad=True)
        tx.abs().sum().backward()
        ng = numeric_grad(lambda a: float(np.abs(a).sum()), [x], 0)
        assert rel_err(tx.grad, ng) < 1e-5

    def test_sqrt_grad_and_zero_guard(self):
        x = np.array([0.0, 1.0, 4.0])
        tx = Tensor(x, requires_grad=True)
        tx.sqrt().sum().backward()
        np.testing.assert_allclose(tx.grad, [0.0, 0.5, 0.25])
        assert np.all(np.isfinite(tx.grad))

    def test_concat_splits_gradient(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 4, 3, 3))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        out = T.concat([ta, tb], axis=1)
        assert out.shape == (1, 6, 3, 3)
        (out * out).sum().backward()
        np.testing.assert_allclose(ta.grad, 2 * a)
        np.testing.assert_allclose(tb.grad, 2 * b)

    def test_relu_sigmoid_gap_grads_match_fd(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.1  # keep away from the relu kink
        tx = Tensor(x, requires_grad=True)
        T.global_average_pool(T.sigmoid(T.relu(tx))).sum().backward()

        def f(x_):
            r = np.where(x_ > 0, x_, 0)
            s = 1 / (1 + np.exp(-r))
            return float(s.mean(axis=(2, 3)).sum())

        assert_grads_close(f, [x], [tx.grad])


class TestStopGradient:
    def test_value_identity(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        np.testing.assert_array_equal(T.stop_gradient(x).data, x.data)

    def test_blocks_gradient_exactly(self):
        x = Tensor(np.arange(4.0) + 1.0, requires_grad=True)
        T.stop_gradient(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_product_with_detached_self(self):
        # d/dx sum(x * sg(x)) = x, not 2x
        v = np.array([1.0, -2.0, 3.0])
        x = Tensor(v, requires_grad=True)
        (x * T.stop_gradient(x)).sum().backward()
        np.testing.assert_allclose(x.grad, v)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(12).standard_normal((3, 3)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 3)))

    def test_five_op_chain_matches_fd(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 4)) + 2.0  # positive, away from kinks
        w = rng.standard_normal((4, 3))
        tx, tw = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = T.sigmoid(T.matmul(tx.abs(), tw))
        (out * out).mean().backward()

        def f(x_, w_):
            s = 1 / (1 + np.exp(-(np.abs(x_) @ w_)))
            return float((s * s).mean())

        assert_grads_close(f, [x, w], [tx.grad, tw.grad])

    def test_disconnected_tensor_keeps_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = x.sum()
        out.backward()
        with pytest.raises(RuntimeError):
            out.backward()

    def test_grad_accumulates_across_graphs(self):
        x = Tensor(np.ones(3), requires_grad=True)
        x.sum().backward()
        (x * 2.0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 3.0))
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_diamond_graph_accumulates_once_per_path(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * 2.0
        (y * y).sum().backward()  # d/dx (2x)^2 = 8x
        np.testing.assert_allclose(x.grad, [24.0])


class TestDeterminism:
    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 3, 3))

        def run():
            out = T.conv2d(Tensor(x), Tensor(k))
            return T.global_average_pool(T.sigmoid(out)).data.copy()

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_float32_inputs_stay_float32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        out = T.sigmoid(x * 2.0)
        assert out.dtype == np.float32
