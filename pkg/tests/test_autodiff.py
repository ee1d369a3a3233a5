import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crashcast import autodiff as ad


def direct_conv(x, kernel, bias):
    """Reference: explicit loops over the zero-padded window."""
    c_out, c_in, k, _ = kernel.shape
    _, h, w = x.shape
    p = (k - 1) // 2
    xp = np.zeros((c_in, h + 2 * p, w + 2 * p))
    xp[:, p:p + h, p:p + w] = x
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            acc += kernel[o, c, dy, dx] * xp[c, y + dy, xx + dx]
                out[o, y, xx] = acc
    return out


class TestConv2dSame:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 4))
        out = ad.conv2d_same(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 1, 1))), ad.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_on_2x2(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = ad.conv2d_same(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.zeros(1)))
        expected = direct_conv(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        np.testing.assert_array_equal(expected, [[[10.0, 10.0], [10.0, 10.0]]])
        np.testing.assert_array_equal(out.data, expected)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 6))
        out = ad.conv2d_same(ad.Tensor(x), ad.Tensor(np.zeros((3, 2, 3, 3))), ad.Tensor([0.5, -1.0, 2.0]))
        for o, b in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(out.data[o], np.full((4, 6), b))

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_direct_summation(self, k):
        rng = np.random.default_rng(k)
        x = rng.normal(size=(3, 5, 7))
        kern = rng.normal(size=(2, 3, k, k))
        bias = rng.normal(size=2)
        out = ad.conv2d_same(ad.Tensor(x), ad.Tensor(kern), ad.Tensor(bias))
        np.testing.assert_allclose(out.data, direct_conv(x, kern, bias), rtol=1e-12, atol=1e-12)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 2, 5, 5))
        kern = rng.normal(size=(3, 2, 3, 3))
        batched = ad.conv2d_same(ad.Tensor(x), ad.Tensor(kern)).data
        for b in range(4):
            np.testing.assert_allclose(batched[b], ad.conv2d_same(ad.Tensor(x[b]), ad.Tensor(kern)).data)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d_same(ad.Tensor(np.zeros((1, 3, 3))), ad.Tensor(np.zeros((1, 1, 2, 2))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            ad.conv2d_same(ad.Tensor(np.zeros((2, 3, 3))), ad.Tensor(np.zeros((1, 3, 3, 3))))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 2, 6, 6))[:, None].repeat(2, axis=1)
        kern = rng.normal(size=(3, 2, 3, 3))
        a, b = 1.7, -0.4

        def conv(v, k=kern):
            return ad.conv2d_same(ad.Tensor(v), ad.Tensor(k)).data

        np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-12)
        k2 = rng.normal(size=kern.shape)
        np.testing.assert_allclose(conv(x, a * kern + b * k2), a * conv(x, kern) + b * conv(x, k2), atol=1e-12)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor([0.0])).data[0] == 0.5

    def test_tanh_at_zero(self):
        assert ad.tanh(ad.Tensor([0.0])).data[0] == 0.0

    def test_hadamard(self):
        np.testing.assert_array_equal(ad.hadamard(ad.Tensor([2.0, 3.0]), ad.Tensor([4.0, 5.0])).data, [8.0, 15.0])

    def test_add(self):
        np.testing.assert_array_equal(ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, -2.0])).data, [4.0, 0.0])

    @pytest.mark.parametrize("op", [ad.add, ad.hadamard, ad.sub])
    def test_shape_mismatch(self, op):
        with pytest.raises(ValueError, match="shape"):
            op(ad.Tensor(np.zeros(2)), ad.Tensor(np.zeros(3)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-30, 30)))
    def test_ranges(self, x):
        s = ad.sigmoid(ad.Tensor(x)).data
        t = ad.tanh(ad.Tensor(x)).data
        assert np.all((s > 0) & (s < 1))
        # tanh rounds to +-1 in double precision once |x| > ~19
        assert np.all(np.abs(t) <= 1)
        inner = np.abs(x) < 18
        assert np.all(np.abs(t[inner]) < 1)

    def test_sigmoid_extremes_are_finite(self):
        s = ad.sigmoid(ad.Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(s))


class TestBackward:
    def test_square_gradient(self):
        x = ad.Tensor([3.0], requires_grad=True)
        ad.backward(ad.total(ad.hadamard(x, x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_sigmoid_gradient_at_zero(self):
        x = ad.Tensor([0.0], requires_grad=True)
        ad.backward(ad.total(ad.sigmoid(x)))
        np.testing.assert_array_equal(x.grad, [0.25])

    def test_non_scalar_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.sigmoid(x))

    def test_repeated_backward_accumulates(self):
        x = ad.Tensor([3.0], requires_grad=True)
        loss = ad.total(ad.hadamard(x, x))
        ad.backward(loss, retain_graph=True)
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_rebuilt_graph_accumulates(self):
        x = ad.Tensor([3.0], requires_grad=True)
        for _ in range(3):
            ad.backward(ad.total(ad.hadamard(x, x)))
        np.testing.assert_array_equal(x.grad, [18.0])

    def test_graph_is_single_use(self):
        x = ad.Tensor([3.0], requires_grad=True)
        loss = ad.total(ad.hadamard(x, x))
        ad.backward(loss)
        with pytest.raises(RuntimeError, match="released"):
            ad.backward(loss)

    def test_shared_subexpression(self):
        # y = x*x used twice: d/dx (y + y*x) = 2x + 3x^2
        x = ad.Tensor([2.0], requires_grad=True)
        y = ad.hadamard(x, x)
        ad.backward(ad.total(ad.add(y, ad.hadamard(y, x))))
        np.testing.assert_allclose(x.grad, [4.0 + 12.0])

    def test_slices_and_concat(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        parts = [x[0:1], x[1:2], x[0:1]]
        ad.backward(ad.total(ad.hadamard(ad.concat(parts, 0), ad.Tensor(np.ones((3, 3)) * 2))))
        np.testing.assert_array_equal(x.grad, [[4.0, 4.0, 4.0], [2.0, 2.0, 2.0]])

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=(2, 6, 6))
        kv = rng.normal(size=(4, 2, 3, 3))

        def run():
            x = ad.Tensor(xv, requires_grad=True)
            k = ad.Tensor(kv, requires_grad=True)
            ad.backward(ad.total(ad.tanh(ad.conv2d_same(x, k))))
            return x.grad, k.grad

        (a1, b1), (a2, b2) = run(), run()
        assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


class TestGradCheck:
    def test_linear_function(self):
        w = ad.Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
        c = ad.Tensor(np.arange(5.0))
        assert ad.grad_check(lambda: ad.total(ad.hadamard(w, c)), [w]) < 1e-9

    def test_constant_function(self):
        w = ad.Tensor(np.ones(3), requires_grad=True)
        zero = ad.Tensor(np.zeros(3))
        assert ad.grad_check(lambda: ad.total(ad.hadamard(w, zero)), [w]) == 0.0

    def test_conv_composite(self):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        k = ad.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
        b = ad.Tensor(rng.normal(size=3), requires_grad=True)

        def f():
            y = ad.conv2d_same(x, k, b)
            return ad.total(ad.hadamard(ad.sigmoid(y), ad.softplus(y)))

        assert ad.grad_check(f, [x, k, b]) < 1e-6

    def test_rejects_bad_eps(self):
        w = ad.Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.total(w), [w], eps=0.1)

    def test_rejects_non_finite(self):
        w = ad.Tensor([np.inf], requires_grad=True)
        with pytest.raises(ValueError, match="finite"):
            ad.grad_check(lambda: ad.total(w), [w])
