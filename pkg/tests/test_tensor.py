"""Unit tests for the tensor engine: forward semantics against numpy,
backward passes against finite differences and hand-derived gradients."""
import numpy as np
import pytest

from panoseg.tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    grad_check,
    interpolate_bilinear,
    matmul,
    maximum,
    minimum,
    tensor,
)
from panoseg.verify import conv2d_oracle, interpolate_oracle, matmul_oracle


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


class TestForward:
    def test_add_mul_div_broadcast(self):
        a = Tensor(rand((2, 3, 4), 1))
        b = Tensor(rand((4,), 2))
        np.testing.assert_allclose((a + b).data, a.data + b.data)
        np.testing.assert_allclose((a * b).data, a.data * b.data)
        np.testing.assert_allclose((a / (b + 10.0)).data, a.data / (b.data + 10.0))

    def test_scalar_operands(self):
        a = Tensor(np.array([1.0, 2.0]))
        np.testing.assert_allclose((2.0 - a).data, [1.0, 0.0])
        np.testing.assert_allclose((6.0 / a).data, [6.0, 3.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])

    def test_leading_broadcast_and_grad_reduction(self):
        a = Tensor(rand((2, 3), 1), requires_grad=True)
        b = Tensor(rand((4, 2, 3), 2))
        out = a + b
        assert out.shape == (4, 2, 3)
        out.sum().backward()
        np.testing.assert_allclose(a.grad, np.full((2, 3), 4.0))

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(rand((2, 3), 1)) + Tensor(rand((2, 4), 2))

    def test_nonfinite_rejected(self):
        a = Tensor(np.array([1.0, 0.0]))
        with pytest.raises(NumericsError):
            Tensor(np.array([1.0, 1.0])) / a
        with pytest.raises(NumericsError):
            Tensor(np.array([1000.0])).exp().exp()

    def test_reductions_match_numpy(self):
        x = rand((2, 3, 4), 3)
        t = Tensor(x)
        np.testing.assert_allclose(t.sum().data, x.sum())
        np.testing.assert_allclose(t.sum(axis=(0, 2)).data, x.sum(axis=(0, 2)))
        np.testing.assert_allclose(t.mean(axis=1, keepdims=True).data,
                                   x.mean(axis=1, keepdims=True))
        np.testing.assert_allclose(t.max(axis=0).data, x.max(axis=0))
        np.testing.assert_array_equal(t.argmax(axis=1), x.argmax(axis=1))

    def test_activations_match_reference(self):
        from scipy.special import erf, expit, log_softmax

        x = rand((3, 5), 4)
        t = Tensor(x)
        np.testing.assert_allclose(t.relu().data, np.maximum(x, 0.0))
        np.testing.assert_allclose(t.sigmoid().data, expit(x), rtol=1e-12)
        np.testing.assert_allclose(
            t.gelu().data, 0.5 * x * (1.0 + erf(x / np.sqrt(2.0))), rtol=1e-12)
        np.testing.assert_allclose(t.softmax(axis=1).data,
                                   np.exp(log_softmax(x, axis=1)), rtol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        s = Tensor(rand((4, 7), 5) * 50).softmax(axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(4), rtol=1e-6)

    def test_shape_ops(self):
        x = rand((2, 3, 4), 6)
        t = Tensor(x)
        np.testing.assert_array_equal(t.reshape(6, 4).data, x.reshape(6, 4))
        np.testing.assert_array_equal(t.transpose((2, 0, 1)).data,
                                      x.transpose(2, 0, 1))
        np.testing.assert_array_equal(t.roll(3, axis=-1).data,
                                      np.roll(x, 3, axis=-1))
        np.testing.assert_array_equal(t[1, :, 2:].data, x[1, :, 2:])

    def test_maximum_minimum_concat(self):
        a, b = rand((3, 4), 7), rand((3, 4), 8)
        np.testing.assert_array_equal(maximum(Tensor(a), Tensor(b)).data,
                                      np.maximum(a, b))
        np.testing.assert_array_equal(minimum(Tensor(a), Tensor(b)).data,
                                      np.minimum(a, b))
        np.testing.assert_array_equal(
            concat([Tensor(a), Tensor(b)], axis=1).data,
            np.concatenate([a, b], axis=1))

    def test_matmul_matches_loop_oracle(self):
        for seed in range(5):
            a = rand((3, 4), seed)
            b = rand((4, 5), seed + 100)
            got = matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-10)

    def test_batched_matmul_matches_numpy(self):
        a = rand((2, 3, 4), 11)
        b = rand((2, 4, 5), 12)
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data,
                                   a @ b, rtol=1e-10)

    def test_conv2d_matches_loop_oracle(self):
        for seed, padding, stride in [(0, "zero", 1), (1, "zero", 2),
                                      (2, "spherical", 1), (3, "spherical", 2)]:
            x = rand((2, 3, 6, 8), seed)
            k = rand((4, 3, 3, 3), seed + 50)
            bias = rand((4,), seed + 90)
            got = conv2d(Tensor(x), Tensor(k), Tensor(bias),
                         stride=stride, padding=padding).data
            want = conv2d_oracle(x, k, bias, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)

    def test_interpolate_matches_oracle(self):
        x = rand((1, 2, 4, 6), 9)
        got = interpolate_bilinear(Tensor(x), 7, 13).data
        np.testing.assert_allclose(got, interpolate_oracle(x, 7, 13), rtol=1e-10)

    def test_float32_inputs_stay_float32(self):
        a = Tensor(rand((2, 2), 1, np.float32))
        assert (a * 2.0).dtype == np.float32
        assert a.sum().dtype == np.float32

    def test_int_data_promoted_to_float32(self):
        assert tensor([[1, 2], [3, 4]]).dtype == np.float32


class TestBackward:
    def test_grad_check_elementwise_chain(self):
        def f(a, b):
            return ((a * b + a / (b * b + 2.0)) - b).sigmoid().sum()

        err = grad_check(f, [Tensor(rand((3, 4), 0), requires_grad=True),
                             Tensor(rand((3, 4), 1), requires_grad=True)])
        assert err < 1e-6

    def test_grad_check_matmul_concat(self):
        def f(a, b):
            c = matmul(a, b)
            return concat([c, c * c], axis=-1).mean()

        err = grad_check(f, [Tensor(rand((2, 3, 4), 2), requires_grad=True),
                             Tensor(rand((2, 4, 2), 3), requires_grad=True)])
        assert err < 1e-6

    def test_grad_check_reductions_and_indexing(self):
        def f(x):
            return (x.max(axis=0) + x[1:, :].sum(axis=0)
                    + x.mean(axis=(0, 1))).sum()

        err = grad_check(f, [Tensor(rand((4, 5), 4), requires_grad=True)])
        assert err < 1e-6

    def test_grad_check_conv_both_paddings(self):
        for padding in ("zero", "spherical"):
            def f(x, k, b):
                return conv2d(x, k, b, padding=padding).gelu().sum()

            err = grad_check(f, [Tensor(rand((1, 2, 4, 6), 5), requires_grad=True),
                                 Tensor(rand((3, 2, 3, 3), 6) * 0.3,
                                        requires_grad=True),
                                 Tensor(rand((3,), 7), requires_grad=True)])
            assert err < 1e-5, padding

    def test_grad_check_interpolate(self):
        def f(x):
            return interpolate_bilinear(x, 5, 9).sum()

        err = grad_check(f, [Tensor(rand((1, 2, 3, 5), 8), requires_grad=True)])
        assert err < 1e-6

    def test_backward_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_max_tie_routes_to_lowest_index(self):
        x = Tensor(np.array([[1.0, 1.0, 0.0]]), requires_grad=True)
        x.max(axis=1).backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_getitem_backward_accumulates_fancy_overlap(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        y = x[np.array([0, 0, 2])]
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])

    def test_detached_tensor_blocks_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x.detach() * x).backward()
        np.testing.assert_allclose(x.grad, [3.0])
