from __future__ import annotations

import numpy as np
import pytest

import oracles
from ewcseg.tensor import (NumericsError, PrecisionError, ShapeError, Tape, TapeError, Tensor,
                           add, backward, bce_with_logits_loss, concat_channels, conv3d_valid,
                           crop_center, max_pool3d, mul, relu, scalar_mul, sigmoid, sum_all,
                           upsample_nearest3d)
from ewcseg.gradcheck import finite_diff_check


def f32(a):
    return np.asarray(a, dtype=np.float32)


class TestConv3d:
    def test_all_ones_kernel_sums_window(self):
        out = conv3d_valid(Tensor(np.ones((1, 5, 5, 5), np.float32)),
                           Tensor(np.ones((1, 1, 3, 3, 3), np.float32)),
                           Tensor(np.zeros(1, np.float32)))
        assert out.shape == (1, 3, 3, 3)
        assert np.all(out.data == 27.0)

    def test_zero_input_returns_bias(self, rng):
        bias = f32([0.5, -1.25, 3.0])
        out = conv3d_valid(Tensor(np.zeros((2, 3, 3, 3), np.float32)),
                           Tensor(rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)),
                           Tensor(bias))
        assert out.shape == (3, 1, 1, 1)
        assert np.array_equal(out.data.reshape(3), bias)

    def test_matches_direct_convolution_oracle(self, rng):
        x = rng.standard_normal((3, 7, 8, 9))
        w = rng.standard_normal((4, 3, 3, 3, 3))
        b = rng.standard_normal(4)
        got = conv3d_valid(Tensor(x), Tensor(w), Tensor(b)).data
        want = oracles.direct_conv3d(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_matches_oracle_single_precision(self, rng):
        x = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = conv3d_valid(Tensor(x), Tensor(w), Tensor(b)).data
        want = oracles.direct_conv3d(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
        assert np.max(np.abs(got - want)) < 1e-4

    def test_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 6, 7)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        err = finite_diff_check(lambda: sum_all(sigmoid(conv3d_valid(x, w, b))),
                                [x, w, b], samples=64, seed=2)
        assert err < 1e-6

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            conv3d_valid(Tensor(np.zeros((1, 4, 4, 4), np.float32)),
                         Tensor(np.zeros((1, 1, 2, 2, 2), np.float32)),
                         Tensor(np.zeros(1, np.float32)))

    def test_channel_mismatch_names_channels(self):
        with pytest.raises(ShapeError, match="channel"):
            conv3d_valid(Tensor(np.zeros((2, 4, 4, 4), np.float32)),
                         Tensor(np.zeros((1, 3, 3, 3, 3), np.float32)),
                         Tensor(np.zeros(1, np.float32)))

    def test_small_extent_names_axis(self):
        with pytest.raises(ShapeError, match="height"):
            conv3d_valid(Tensor(np.zeros((1, 4, 2, 4), np.float32)),
                         Tensor(np.zeros((1, 1, 3, 3, 3), np.float32)),
                         Tensor(np.zeros(1, np.float32)))

    def test_shape_algebra_property(self, rng):
        for _ in range(20):
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.choice([3, 5]))
            d, h, w = (int(rng.integers(k, k + 6)) for _ in range(3))
            out = conv3d_valid(Tensor(rng.standard_normal((cin, d, h, w)).astype(np.float32)),
                               Tensor(rng.standard_normal((cout, cin, k, k, k)).astype(np.float32)),
                               Tensor(np.zeros(cout, np.float32)))
            assert out.shape == (cout, d - k + 1, h - k + 1, w - k + 1)


class TestMaxPool:
    def test_max_of_block(self):
        x = Tensor(np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2))
        out = max_pool3d(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == 8.0

    def test_tie_routes_gradient_to_first_element(self):
        x = Tensor(np.ones((1, 2, 2, 2), np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(max_pool3d(x))
        backward(loss, tape)
        expected = np.zeros((1, 2, 2, 2), np.float32)
        expected[0, 0, 0, 0] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_constant_input_constant_output(self):
        out = max_pool3d(Tensor(np.full((2, 4, 4, 4), 3.5, np.float32)))
        assert np.all(out.data == 3.5)

    def test_gradcheck_tie_free(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        err = finite_diff_check(lambda: sum_all(sigmoid(max_pool3d(x))), [x], samples=48, seed=5)
        assert err < 1e-6

    def test_indivisible_extent_names_axis(self):
        with pytest.raises(ShapeError, match="depth extent 3"):
            max_pool3d(Tensor(np.zeros((1, 3, 4, 4), np.float32)))


class TestUpsample:
    def test_replication(self):
        out = upsample_nearest3d(Tensor(np.full((1, 1, 1, 1), 5.0, np.float32)))
        assert out.shape == (1, 2, 2, 2)
        assert np.all(out.data == 5.0)

    def test_pool_inverts_upsample(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 4, 4)).astype(np.float32))
        roundtrip = max_pool3d(upsample_nearest3d(x))
        assert np.array_equal(roundtrip.data, x.data)

    def test_gradcheck_sums_children(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        err = finite_diff_check(lambda: sum_all(sigmoid(upsample_nearest3d(x))), [x], samples=32, seed=7)
        assert err < 1e-6


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros((1, 1, 1, 1), np.float32))).data.reshape(()) == 0.5

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(f32([[-1.0, 0.0, 2.0]]).reshape(1, 1, 1, 3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(relu(x))
        backward(loss, tape)
        assert np.array_equal(x.grad.reshape(3), f32([0.0, 0.0, 1.0]))

    def test_crop_center_keeps_centered_window(self, rng):
        x = Tensor(rng.standard_normal((1, 5, 5, 5)).astype(np.float32))
        out = crop_center(x, (3, 3, 3))
        assert np.array_equal(out.data, x.data[:, 1:4, 1:4, 1:4])

    def test_crop_center_odd_margin_leads(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 6, 6)).astype(np.float32))
        out = crop_center(x, (3, 3, 3))
        assert np.array_equal(out.data, x.data[:, 2:5, 2:5, 2:5])

    def test_crop_too_large_rejected(self):
        with pytest.raises(ShapeError, match="exceeds"):
            crop_center(Tensor(np.zeros((1, 3, 3, 3), np.float32)), (4, 3, 3))

    def test_concat_channels_shapes_and_split_gradient(self, rng):
        a = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4, 4, 4)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            out = concat_channels(a, b)
            assert out.shape == (5, 4, 4, 4)
            loss = sum_all(scalar_mul(2.0, out))
        backward(loss, tape)
        assert np.all(a.grad == 2.0) and a.grad.shape == a.shape
        assert np.all(b.grad == 2.0) and b.grad.shape == b.shape

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="spatial"):
            concat_channels(Tensor(np.zeros((1, 4, 4, 4), np.float32)),
                            Tensor(np.zeros((1, 4, 4, 5), np.float32)))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError, match="mismatch"):
            add(Tensor(np.zeros(3, np.float32)), Tensor(np.zeros(4, np.float32)))

    def test_mixed_precision_rejected(self):
        with pytest.raises(PrecisionError):
            add(Tensor(np.zeros(3, np.float32)), Tensor(np.zeros(3, np.float64)))


class TestBCE:
    def test_zero_logits_give_ln2(self, rng):
        z = Tensor(np.zeros((1, 3, 3, 3), np.float32))
        t = Tensor((rng.random((1, 3, 3, 3)) < 0.5).astype(np.float32))
        assert abs(bce_with_logits_loss(z, t).item() - np.log(2.0)) < 1e-6

    def test_saturated_correct_prediction(self):
        t = np.zeros((1, 2, 2, 2), np.float32)
        t[0, 0] = 1.0
        z = np.where(t == 1.0, 20.0, -20.0).astype(np.float32)
        assert bce_with_logits_loss(Tensor(z), Tensor(t)).item() < 1e-8

    def test_gradient_formula_and_gradcheck(self, rng):
        z = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        t = Tensor((rng.random((1, 4, 4, 4)) < 0.5).astype(np.float64))
        err = finite_diff_check(lambda: bce_with_logits_loss(z, t), [z], samples=40, seed=11)
        assert err < 1e-6
        from scipy.special import expit

        z.zero_grad()
        with Tape() as tape:
            loss = bce_with_logits_loss(z, t)
        backward(loss, tape)
        want = (expit(z.data) - t.data) / z.size
        assert np.max(np.abs(z.grad - want)) < 1e-12

    def test_non_binary_targets_rejected(self):
        with pytest.raises(ShapeError, match="binary"):
            bce_with_logits_loss(Tensor(np.zeros((1, 2, 2, 2), np.float32)),
                                 Tensor(np.full((1, 2, 2, 2), 0.5, np.float32)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(8, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.ones(8, np.float32))

    def test_fanout_accumulates(self):
        x = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(x, x))
        backward(loss, tape)
        assert np.array_equal(x.grad, np.full(4, 2.0, np.float32))

    def test_fanout_equals_scaled_single_use(self, rng):
        data = rng.standard_normal(6).astype(np.float32)
        x1 = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            backward(sum_all(add(x1, x1)), tape)
        x2 = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            backward(sum_all(scalar_mul(2.0, x2)), tape)
        assert np.array_equal(x1.grad, x2.grad)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3, np.float32), requires_grad=True)
        with Tape() as tape:
            y = add(x, x)
        with pytest.raises(TapeError, match="scalar"):
            backward(y, tape)

    def test_second_backward_rejected(self):
        x = Tensor(np.zeros(3, np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        with pytest.raises(TapeError, match="consumed"):
            backward(loss, tape)

    def test_loss_not_under_tape_rejected(self):
        x = Tensor(np.zeros(3, np.float32), requires_grad=True)
        with Tape() as tape:
            sum_all(x)
        stray = sum_all(x)  # built outside the tape
        with pytest.raises(TapeError, match="not produced"):
            backward(stray, tape)

    def test_deterministic_bitwise(self, rng):
        data = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
        w = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            k = Tensor(w.copy(), requires_grad=True)
            with Tape() as tape:
                loss = sum_all(sigmoid(conv3d_valid(x, k, Tensor(np.zeros(2, np.float32)))))
            backward(loss, tape)
            return loss.item(), x.grad.copy(), k.grad.copy()

        l1, g1, gw1 = run()
        l2, g2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2) and np.array_equal(gw1, gw2)


class TestNumericsPolicy:
    def test_non_finite_forward_aborts(self):
        x = Tensor(np.full((1, 3, 3, 3), np.finfo(np.float32).max, np.float32))
        w = Tensor(np.ones((1, 1, 3, 3, 3), np.float32))
        with pytest.raises(NumericsError, match="conv3d_valid"):
            conv3d_valid(x, w, Tensor(np.zeros(1, np.float32)))

    def test_non_finite_backward_aborts(self):
        x = Tensor(np.zeros((1, 2, 2, 2), np.float32), requires_grad=True)
        big = Tensor(np.full((1, 2, 2, 2), 1e38, np.float32))
        with Tape() as tape:
            # forward stays finite; the product in mul's backward overflows
            loss = sum_all(mul(mul(x, big), big))
        with pytest.raises(NumericsError, match="backward"), np.errstate(over="ignore"):
            backward(loss, tape)
