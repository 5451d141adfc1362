"""Autograd ops: forward values against loop oracles, backward against finite differences."""
import math

import numpy as np
import pytest

from rundet.tensor import (DimensionError, GraphError, Param, add, affine, backward,
                           concat_channels, conv2d, deconv2d, l2norm_channels, maxpool2d, relu,
                           sgd_step, smooth_l1, softmax_ce, to_rows, zero_grad)

from conftest import check_op_grads


def conv_oracle(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - K) // stride + 1, (W + 2 * pad - K) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + K, j * stride:j * stride + K]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


def deconv_oracle(x, w, stride, pad):
    B, C, H, W = x.shape
    _, O, K, _ = w.shape
    Ho, Wo = (H - 1) * stride + K, (W - 1) * stride + K
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    out[n, :, i * stride:i * stride + K, j * stride:j * stride + K] += x[n, c, i, j] * w[c]
    return out[:, :, pad:Ho - pad, pad:Wo - pad]


class TestConv:
    def test_hand_example(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = conv2d(x, np.ones((1, 1, 2, 2)), stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[10, 18], [42, 50]])

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        # output at the centre sees x[0,0] through w[0,0]
        assert conv2d(x, w, pad=0).data[0, 0, 0, 0] == 0.0
        assert conv2d(x, w, pad=1).data[0, 0, 1, 1] == 0.0
        assert conv2d(x, w, pad=1).data[0, 0, 0, 0] == 4.0

    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 1, 0)])
    def test_matches_loop_oracle(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(conv2d(x, w, b, stride, pad).data, conv_oracle(x, w, b, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


class TestDeconv:
    def test_single_pixel_stamps_kernel(self):
        w = np.arange(4.0).reshape(1, 1, 2, 2)
        out = deconv2d(np.ones((1, 1, 1, 1)) * 2.0, w, stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[0, 2], [4, 6]])

    @pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1)])
    def test_matches_scatter_oracle(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 2, k, k))
        np.testing.assert_allclose(deconv2d(x, w, stride=stride, pad=pad).data,
                                   deconv_oracle(x, w, stride, pad), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (1, 1, 0)])
    def test_adjoint_of_conv(self, rng, k, stride, pad):
        # <conv(x), y> == <x, deconv(y)> with the same (O,C,K,K) array
        for _ in range(10):
            x = rng.standard_normal((2, 3, 8, 8))
            w = rng.standard_normal((4, 3, k, k))
            y = rng.standard_normal(conv2d(x, w, stride=stride, pad=pad).shape)
            lhs = (conv2d(x, w, stride=stride, pad=pad).data * y).sum()
            rhs = (x * deconv2d(y, w, stride=stride, pad=pad).data).sum()
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


class TestPoolAndActivations:
    def test_maxpool_values(self):
        x = np.array([[1, 5, 2, 0], [3, 4, 8, 1], [0, 0, 1, 1], [7, 0, 1, 2]], float)[None, None]
        np.testing.assert_array_equal(maxpool2d(x).data[0, 0], [[5, 8], [7, 2]])

    def test_maxpool_tie_routes_to_first(self):
        p = Param(np.ones((1, 1, 2, 2)), "x")
        backward(_probe(maxpool2d(p)))
        np.testing.assert_array_equal(p.grad[0, 0], [[0.5, 0], [0, 0]])

    def test_relu_gradient_at_zero_is_zero(self):
        p = Param(np.array([-1.0, 0.0, 2.0]), "x")
        backward(_probe(relu(p)))
        np.testing.assert_array_equal(p.grad, [0, 0, 0.5])

    def test_l2norm_scales_unit_vector(self):
        x = np.array([0.6, 0.8]).reshape(1, 2, 1, 1)
        out = l2norm_channels(x, np.array([20.0, 20.0]))
        # eps = 1e-10 sits inside the square root
        np.testing.assert_allclose(out.data.ravel(), np.array([12.0, 16.0]) / math.sqrt(1 + 1e-10),
                                   rtol=1e-15)

    def test_l2norm_zero_vector_is_finite(self):
        out = l2norm_channels(np.zeros((1, 3, 2, 2)), np.full(3, 20.0))
        assert np.all(out.data == 0)

    def test_l2norm_gamma_length(self):
        with pytest.raises(DimensionError):
            l2norm_channels(np.ones((1, 3, 2, 2)), np.ones(2))


def _probe(t):
    """Scalar loss whose gradient w.r.t. every element of ``t`` is exactly 0.5."""
    return smooth_l1(t, t.data - 0.5)


class TestLosses:
    def test_uniform_logits_cost_log_k(self):
        loss = softmax_ce(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(3 * math.log(4), abs=1e-12)

    def test_ce_gradient_is_softmax_minus_onehot(self, rng):
        z = rng.standard_normal((5, 4))
        t = np.array([0, 3, 1, 1, 2])
        p = Param(z, "z")
        backward(softmax_ce(p, t))
        soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        soft[np.arange(5), t] -= 1
        np.testing.assert_allclose(p.grad, soft, atol=1e-12)

    def test_ce_mask(self):
        loss = softmax_ce(np.zeros((3, 2)), np.array([0, 1, 1]), mask=np.array([True, False, False]))
        assert loss.item() == pytest.approx(math.log(2))

    def test_ce_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_ce(np.zeros((2, 3)), np.array([0, 3]))

    @pytest.mark.parametrize("d,expected", [(0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-3.0, 2.5), (1.0, 0.5)])
    def test_smooth_l1_values(self, d, expected):
        assert smooth_l1(np.array([d]), np.array([0.0])).item() == pytest.approx(expected)

    def test_smooth_l1_gradient_continuous_at_one(self):
        grads = []
        for d in (1 - 1e-9, 1 + 1e-9):
            p = Param(np.array([d]), "d")
            backward(smooth_l1(p, np.zeros(1)))
            grads.append(p.grad[0])
        assert grads[0] == pytest.approx(grads[1], abs=1e-8)

    def test_smooth_l1_shape_mismatch(self):
        with pytest.raises(DimensionError):
            smooth_l1(np.zeros((2, 4)), np.zeros((2, 3)))


class TestGradients:
    """Backward vs central finite differences (h = 1e-6) for every op."""

    def test_conv(self, rng):
        y = rng.standard_normal((2, 3, 4, 4))
        err = check_op_grads(lambda x, w, b: smooth_l1(conv2d(x, w, b, 2, 1), y),
                             [rng.standard_normal((2, 2, 7, 7)), rng.standard_normal((3, 2, 3, 3)),
                              rng.standard_normal(3)], rng)
        assert err < 1e-4

    def test_deconv(self, rng):
        y = rng.standard_normal((2, 3, 8, 8))
        err = check_op_grads(lambda x, w, b: smooth_l1(deconv2d(x, w, b, 2), y),
                             [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 2, 2)),
                              rng.standard_normal(3)], rng)
        assert err < 1e-4

    def test_maxpool_relu_add_affine(self, rng):
        y = rng.standard_normal((1, 2, 3, 3))
        err = check_op_grads(lambda a, b: smooth_l1(affine(add(maxpool2d(relu(a)), b), 1.7, 0.3), y),
                             [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((1, 2, 3, 3))], rng)
        assert err < 1e-4

    def test_l2norm(self, rng):
        y = rng.standard_normal((2, 4, 3, 3))
        err = check_op_grads(lambda x, g: smooth_l1(l2norm_channels(x, g), y),
                             [rng.standard_normal((2, 4, 3, 3)), rng.uniform(1, 3, 4)], rng)
        assert err < 1e-5

    def test_to_rows_softmax(self, rng):
        t = rng.integers(0, 3, size=(2, 2 * 9 + 2 * 4))
        err = check_op_grads(lambda a, b: softmax_ce(to_rows([a, b], 3), t),
            [rng.standard_normal((2, 6, 3, 3)), rng.standard_normal((2, 6, 2, 2))], rng)
        assert err < 1e-4

    def test_concat(self, rng):
        y = rng.standard_normal((1, 5, 2, 2))
        err = check_op_grads(lambda a, b: smooth_l1(concat_channels([a, b]), y),
                             [rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 3, 2, 2))], rng)
        assert err < 1e-4


class TestGraph:
    def test_backward_needs_scalar(self):
        with pytest.raises(GraphError):
            backward(relu(Param(np.ones(3), "x")))

    def test_param_grads_accumulate_until_zeroed(self):
        p = Param(np.array([2.0]), "p")
        backward(smooth_l1(p, np.zeros(1)))
        backward(smooth_l1(p, np.zeros(1)))
        assert p.grad[0] == 2.0
        zero_grad([p])
        assert p.grad[0] == 0.0

    def test_shared_input_gets_summed_gradient(self):
        p = Param(np.array([0.25]), "p")
        backward(smooth_l1(add(p, p, p), np.zeros(1)))
        # d/dp 0.5*(3p)^2 = 9p
        assert p.grad[0] == pytest.approx(2.25)

    def test_to_rows_layout(self):
        # two anchors x 2 values on a 1x2 map: channel a*k+j -> row (col, anchor)
        m = np.arange(8.0).reshape(1, 4, 1, 2)
        rows = to_rows([m], 2).data[0]
        np.testing.assert_array_equal(rows, [[0, 2], [4, 6], [1, 3], [5, 7]])


class TestSGD:
    def test_plain_step(self):
        p = Param(np.array([1.0]), "w")
        p.grad = np.array([0.5])
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.95)

    def test_momentum_recurrence(self):
        p = Param(np.array([0.0]), "w")
        seen = []
        for _ in range(2):
            p.grad = np.array([1.0])
            sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
            seen.append(p.data[0])
        assert seen == pytest.approx([-0.1, -0.29])

    def test_weight_decay_term(self):
        p = Param(np.array([2.0]), "w")
        sgd_step([p], lr=0.5, momentum=0.0, weight_decay=0.1)
        assert p.data[0] == pytest.approx(1.9)

    def test_frozen_param_untouched(self, rng):
        p = Param(rng.standard_normal(5), "w", frozen=True)
        before = p.data.tobytes()
        for _ in range(3):
            p.grad = rng.standard_normal(5)
            sgd_step([p], lr=1.0)
        assert p.data.tobytes() == before

    def test_frozen_param_gets_no_gradient(self):
        p = Param(np.array([3.0]), "w", frozen=True)
        backward(smooth_l1(add(p, Param(np.array([1.0]), "q")), np.zeros(1)))
        assert p.grad[0] == 0.0
