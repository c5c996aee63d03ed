"""Autodiff core: oracles for conv/dense/softmax plus gradient checks.

Reference implementations here are deliberately naive (triple loops) so the
vectorized forward paths are checked against something with no shared code.
"""

import numpy as np
import pytest

from panokit import tensor as T
from panokit.errors import ShapeError


def conv2d_bruteforce(x, kernel, bias, pad_mode, p, stride=1):
    """Triple-loop convolution oracle. Horizontal taps wrap or read zero."""
    cin, h, w = x.shape
    cout, cin2, k, _ = kernel.shape
    assert cin == cin2
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oi in range(ho):
            for oj in range(wo):
                acc = bias[co]
                for ci in range(cin):
                    for a in range(k):
                        for b in range(k):
                            ii = oi * stride + a - p
                            jj = oj * stride + b - p
                            if ii < 0 or ii >= h:
                                continue
                            if pad_mode == "wrap":
                                jj = jj % w
                            elif jj < 0 or jj >= w:
                                continue
                            acc += x[ci, ii, jj] * kernel[co, ci, a, b]
                out[co, oi, oj] = acc
    return out


def dense_bruteforce(x, weight, bias):
    n, din = x.shape
    dout = weight.shape[0]
    out = np.zeros((n, dout))
    for r in range(n):
        for o in range(dout):
            s = bias[o]
            for i in range(din):
                s += x[r, i] * weight[o, i]
            out[r, o] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


class TestWrapPad:
    def test_columns_follow_cyclic_layout(self):
        x = T.Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 4))
        out = T.wrap_pad(x, 1)
        assert out.data[0, 0].tolist() == [3.0, 0.0, 1.0, 2.0, 3.0, 0.0]

    def test_two_column_pad(self):
        x = T.Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 4))
        out = T.wrap_pad(x, 2)
        assert out.data[0, 0].tolist() == [2, 3, 0, 1, 2, 3, 0, 1]

    def test_pad_wider_than_map_rejected(self):
        x = T.Tensor(np.zeros((1, 2, 3)))
        with pytest.raises(ShapeError):
            T.wrap_pad(x, 3)

    def test_gradient_folds_back_cyclically(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        out = T.wrap_pad(x, 2)
        weights = rng.normal(size=out.data.shape)
        (out * T.Tensor(weights)).sum().backward()
        # each input column receives its own weight plus any wrapped copies
        expected = weights[..., 2:7].copy()
        expected[..., 3:] += weights[..., :2]
        expected[..., :2] += weights[..., 7:]
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)


class TestConv2d:
    @pytest.mark.parametrize("mode", ["wrap", "zero"])
    @pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 1), (1, 1)])
    def test_matches_bruteforce(self, rng, mode, k, stride):
        x = rng.normal(size=(3, 6, 8))
        kern = rng.normal(size=(4, 3, k, k))
        bias = rng.normal(size=4)
        p = (k - 1) // 2
        got = T.conv2d(T.Tensor(x), T.Tensor(kern), T.Tensor(bias),
                       T.PadSpec(mode, p), stride=stride)
        want = conv2d_bruteforce(x, kern, bias, mode, p, stride)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_wrap_makes_conv_shift_equivariant(self, rng):
        x = rng.normal(size=(2, 5, 12))
        kern = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        conv = lambda a: T.conv2d(T.Tensor(a), T.Tensor(kern), T.Tensor(bias),
                                  T.PadSpec("wrap", 1)).data
        for shift in (1, 5, 11):
            np.testing.assert_allclose(
                conv(np.roll(x, shift, axis=2)),
                np.roll(conv(x), shift, axis=2), atol=1e-12)

    def test_zero_pad_not_shift_equivariant(self, rng):
        x = rng.normal(size=(2, 5, 12))
        kern = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        conv = lambda a: T.conv2d(T.Tensor(a), T.Tensor(kern), T.Tensor(bias),
                                  T.PadSpec("zero", 1)).data
        diff = np.abs(conv(np.roll(x, 3, axis=2)) - np.roll(conv(x), 3, axis=2))
        assert diff.max() > 1e-6

    @pytest.mark.parametrize("mode", ["wrap", "zero"])
    def test_gradients_finite_diff(self, rng, mode):
        x0 = rng.normal(size=(2, 4, 6))
        kern = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        bias = T.Tensor(rng.normal(size=3), requires_grad=True)
        probe = T.Tensor(rng.normal(size=(3, 4, 6)))

        def wrt_x(t):
            return (T.conv2d(t, kern.detach(), bias.detach(),
                             T.PadSpec(mode, 1)) * probe).sum()

        assert T.finite_diff_check(wrt_x, T.Tensor(x0)) < 1e-6

        def wrt_k(t):
            return (T.conv2d(T.Tensor(x0),
                             T.reshape(t, (3, 2, 3, 3)), bias.detach(),
                             T.PadSpec(mode, 1)) * probe).sum()

        assert T.finite_diff_check(wrt_k, T.Tensor(kern.data.reshape(-1))) < 1e-6

    def test_strided_gradient(self, rng):
        kern = T.Tensor(rng.normal(size=(2, 2, 3, 3)))
        bias = T.Tensor(rng.normal(size=2))
        probe = T.Tensor(rng.normal(size=(2, 3, 4)))

        def f(t):
            return (T.conv2d(t, kern, bias, T.PadSpec("wrap", 1), stride=2)
                    * probe).sum()

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(2, 6, 8)))) < 1e-6

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.Tensor(np.zeros((2, 4, 4))),
                     T.Tensor(np.zeros((1, 3, 3, 3))),
                     T.Tensor(np.zeros(1)), T.PadSpec("zero", 1))

    def test_bad_pad_amount_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.Tensor(np.zeros((1, 4, 4))),
                     T.Tensor(np.zeros((1, 1, 3, 3))),
                     T.Tensor(np.zeros(1)), T.PadSpec("zero", 2))


class TestConvTranspose:
    def test_single_pixel_paints_kernel_block(self):
        x = np.zeros((1, 2, 2))
        x[0, 1, 0] = 2.0
        kern = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        out = T.conv_transpose2x(T.Tensor(x), T.Tensor(kern), T.Tensor(np.zeros(1)))
        want = np.zeros((1, 4, 4))
        want[0, 2:4, 0:2] = 2.0 * kern[0, 0]
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_gradient(self, rng):
        kern = T.Tensor(rng.normal(size=(2, 3, 2, 2)))
        bias = T.Tensor(rng.normal(size=3))
        probe = T.Tensor(rng.normal(size=(3, 6, 8)))

        def f(t):
            return (T.conv_transpose2x(t, kern, bias) * probe).sum()

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(2, 3, 4)))) < 1e-6


class TestUpsample:
    def test_constant_map_stays_constant(self):
        x = T.Tensor(np.full((2, 3, 4), 7.0))
        out = T.upsample_bilinear(x, 4)
        assert out.data.shape == (2, 12, 16)
        np.testing.assert_allclose(out.data, 7.0, atol=1e-12)

    def test_width_interpolation_wraps(self):
        # single row, one hot column: wrap means the neighbour across the
        # seam receives interpolated mass too
        x = np.zeros((1, 1, 4))
        x[0, 0, 0] = 1.0
        out = T.upsample_bilinear(T.Tensor(x), 2).data[0, 0]
        assert out[-1] > 0.0  # mass leaked across the seam
        np.testing.assert_allclose(out.sum(), 2.0, atol=1e-12)

    def test_shift_equivariant_on_width(self, rng):
        x = rng.normal(size=(2, 4, 6))
        up = lambda a: T.upsample_bilinear(T.Tensor(a), 4).data
        np.testing.assert_allclose(
            up(np.roll(x, 2, axis=2)), np.roll(up(x), 8, axis=2), atol=1e-12)

    def test_gradient(self, rng):
        probe = T.Tensor(rng.normal(size=(1, 8, 12)))

        def f(t):
            return (T.upsample_bilinear(t, 4) * probe).sum()

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(1, 2, 3)))) < 1e-6


class TestDenseSoftmax:
    def test_dense_matches_bruteforce(self, rng):
        x = rng.normal(size=(5, 7))
        w = rng.normal(size=(3, 7))
        b = rng.normal(size=3)
        got = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        np.testing.assert_allclose(got, dense_bruteforce(x, w, b), atol=1e-12)

    def test_softmax_hand_values(self):
        x = T.Tensor([[0.0, np.log(2.0), np.log(3.0)]])
        out = T.softmax(x, axis=-1).data
        np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)

    def test_softmax_rows_sum_to_one_and_stable(self, rng):
        x = rng.normal(size=(4, 9)) * 200.0  # would overflow naive exp
        out = T.softmax(T.Tensor(x), axis=-1).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_rejects_nan(self):
        with pytest.raises(ValueError):
            T.softmax(T.Tensor([np.nan, 0.0]))

    def test_dense_and_softmax_gradients(self, rng):
        w = T.Tensor(rng.normal(size=(3, 5)))
        b = T.Tensor(rng.normal(size=3))
        probe = T.Tensor(rng.normal(size=(2, 3)))

        def f(t):
            return (T.softmax(T.dense(t, w, b), axis=-1) * probe).sum()

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(2, 5)))) < 1e-6


class TestWeightedBce:
    def test_matches_composed_formula(self, rng):
        z = rng.normal(size=(3, 4))
        y = (rng.random(size=(3, 4)) > 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, size=(3, 4))
        got = T.weighted_bce_logits(T.Tensor(z), y, w).item()
        s = 1.0 / (1.0 + np.exp(-z))
        want = (w * -(y * np.log(s) + (1 - y) * np.log(1 - s))).mean()
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_extreme_logits_stay_finite(self):
        z = T.Tensor([[500.0, -500.0]], requires_grad=True)
        out = T.weighted_bce_logits(z, np.array([[1.0, 0.0]]))
        assert np.isfinite(out.item())
        out.backward()
        assert np.isfinite(z.grad).all()

    def test_gradient(self, rng):
        y = (rng.random(size=(2, 3)) > 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, size=(2, 3))

        def f(t):
            return T.weighted_bce_logits(t, y, w)

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(2, 3)))) < 1e-6


class TestAutodiffCore:
    def test_broadcast_add_mul_gradients(self, rng):
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4,))

        def f(t):
            return (t * T.Tensor(b0) + T.Tensor(b0)).sum()

        assert T.finite_diff_check(f, T.Tensor(a0)) < 1e-7

    def test_reused_node_accumulates(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-12)

    def test_chain_with_reductions_and_shape_ops(self, rng):
        probe = T.Tensor(rng.normal(size=(2, 6)))

        def f(t):
            h = T.tanh(T.reshape(t, (2, 6)))
            return (h * probe).mean() + T.relu(h).sum() * 0.1

        assert T.finite_diff_check(f, T.Tensor(rng.normal(size=(3, 4)))) < 1e-6

    def test_concat_gradient_splits(self, rng):
        a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        out = T.concat([a, b], axis=1)
        probe = rng.normal(size=(2, 5))
        (out * T.Tensor(probe)).sum().backward()
        np.testing.assert_allclose(a.grad, probe[:, :3], atol=1e-12)
        np.testing.assert_allclose(b.grad, probe[:, 3:], atol=1e-12)

    def test_no_grad_builds_no_graph(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        y2 = x * 2.0
        assert y2.requires_grad

    def test_backward_requires_scalar(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_deterministic_repeated_backward(self, rng):
        x0 = rng.normal(size=(2, 5, 8))
        kern0 = rng.normal(size=(3, 2, 3, 3))

        def run():
            x = T.Tensor(x0, requires_grad=True)
            kern = T.Tensor(kern0, requires_grad=True)
            out = T.conv2d(x, kern, T.Tensor(np.zeros(3)), T.PadSpec("wrap", 1))
            (out * out).sum().backward()
            return x.grad.copy(), kern.grad.copy()

        gx1, gk1 = run()
        gx2, gk2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gk1, gk2)
