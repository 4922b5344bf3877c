import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sapbench import autodiff as ad
from sapbench.autodiff import Tensor
from sapbench.errors import DimensionError, InputError, NumericError, StateError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check_op(build, *arrays):
    """Compare analytic and central-difference gradients of ``sum(w * build(*inputs))``."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    probe = np.random.default_rng(0).normal(size=out.shape)
    ad.backward(ad.tsum(ad.mul(out, Tensor(probe))))
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(v)
            return float(np.sum(build(*args).data * probe))

        assert rel_err(leaves[i].grad, numeric_grad(f, a.copy())) < 1e-5


class TestForward:
    def test_matmul_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_matmul_hand(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matmul_zero(self):
        out = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
        assert not out.data.any()

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        assert np.array_equal(ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)

    def test_conv_direct_sum(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2)))).data.tolist() == [[[[10.0]]]]

    def test_conv_zero_input(self):
        k = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
        assert not ad.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(k), padding=1).data.any()

    def test_conv_is_cross_correlation(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1
        k = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ad.conv2d(Tensor(x), Tensor(k), padding=1).data[0, 0]
        assert np.array_equal(out, k[0, 0, ::-1, ::-1])

    def test_conv_output_size(self):
        assert ad.conv2d_output_size(7, 7, 3, 3, 2, 1) == (4, 4)

    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
        assert not ad.relu(Tensor(-np.arange(1.0, 5.0))).data.any()

    def test_relu_gradient(self):
        x = Tensor([-1.0, 3.0], requires_grad=True)
        ad.backward(ad.tsum(ad.relu(x)))
        assert x.grad.tolist() == [0, 1]

    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((1, 10))), [3])
        assert math.isclose(loss.item(), math.log(10), rel_tol=1e-6)

    def test_large_logits_stable(self):
        loss = ad.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_cross_entropy_oracle(self, f64):
        z = np.random.default_rng(3).normal(size=(3, 4))
        y = np.array([0, 3, 1])
        expect = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(z.tolist(), y)])
        assert ad.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expect, abs=1e-6)

    def test_bad_label(self):
        with pytest.raises(InputError):
            ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_avgpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert ad.avgpool2d(Tensor(x), 2).data[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_bias_broadcast_only_axis1(self):
        out = ad.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert out.data.tolist() == [[1, 2, 3], [1, 2, 3]]
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0, 3.0]))

    def test_overflow_is_error(self):
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            ad.mul(Tensor([1e38]), 1e10)

    def test_precision_context(self):
        with ad.precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
        with pytest.raises(InputError):
            ad.set_precision("float16")


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        ad.backward(ad.tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_half_square(self, f64):
        v = np.random.default_rng(0).normal(size=5)
        x = Tensor(v, requires_grad=True)
        ad.backward(ad.mul(ad.tsum(ad.mul(x, x)), 0.5))
        assert np.allclose(x.grad, v, rtol=0, atol=1e-15)

    def test_graph_consumed_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        with pytest.raises(StateError):
            ad.backward(loss)

    def test_leaf_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tsum(x))
        ad.backward(ad.tsum(x))
        assert x.grad.tolist() == [2, 2]

    def test_shared_node_visited_once(self, f64):
        x = Tensor([2.0], requires_grad=True)
        y = ad.mul(x, x)
        ad.backward(ad.tsum(ad.add(y, y)))
        assert x.grad.tolist() == [8.0]

    def test_non_scalar_loss(self):
        with pytest.raises(DimensionError):
            ad.backward(ad.mul(Tensor([1.0, 2.0], requires_grad=True), 2.0))

    @pytest.mark.parametrize("name", ["add", "bias", "mul", "scale", "matmul", "relu", "reshape", "mean",
                                      "conv", "conv_strided", "avgpool", "xent"])
    def test_op_gradients(self, f64, name):
        g = np.random.default_rng(zlib.crc32(name.encode()))
        cases = {
            "add": (lambda a, b: ad.add(a, b), g.normal(size=(3, 4)), g.normal(size=(3, 4))),
            "bias": (lambda a, b: ad.add(a, b), g.normal(size=(2, 3, 2, 2)), g.normal(size=3)),
            "mul": (lambda a, b: ad.mul(a, b), g.normal(size=(3, 4)), g.normal(size=(3, 4))),
            "scale": (lambda a: ad.mul(a, -1.7), g.normal(size=(5,))),
            "matmul": (lambda a, b: ad.matmul(a, b), g.normal(size=(3, 4)), g.normal(size=(4, 2))),
            "relu": (lambda a: ad.relu(a), g.normal(size=(4, 5)) + 0.05),
            "reshape": (lambda a: ad.reshape(a, (6, 2)), g.normal(size=(3, 4))),
            "mean": (lambda a: ad.mean(a), g.normal(size=(3, 4))),
            "conv": (lambda a, k: ad.conv2d(a, k, padding=1), g.normal(size=(2, 2, 5, 5)), g.normal(size=(3, 2, 3, 3))),
            "conv_strided": (lambda a, k: ad.conv2d(a, k, stride=2), g.normal(size=(1, 2, 6, 6)),
                             g.normal(size=(2, 2, 2, 2))),
            "avgpool": (lambda a: ad.avgpool2d(a, 2), g.normal(size=(2, 3, 4, 4))),
            "xent": (lambda a: ad.softmax_cross_entropy(a, [1, 0, 2]), g.normal(size=(3, 4))),
        }
        fn, *arrays = cases[name]
        check_op(fn, *arrays)

    def test_mlp_loss_matches_finite_differences(self, f64):
        g = np.random.default_rng(7)
        for _ in range(20):
            x = g.normal(size=(4, 6))
            y = g.integers(0, 3, size=4)
            w1, b1, w2, b2 = g.normal(size=(6, 5)), g.normal(size=5), g.normal(size=(5, 3)), g.normal(size=3)

            def loss(x, w1, b1, w2, b2):
                h = ad.relu(ad.add(ad.matmul(x, w1), b1))
                return ad.softmax_cross_entropy(ad.add(ad.matmul(h, w2), b2), y)

            check_op(loss, x, w1, b1, w2, b2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity_of_backward(n, d, c, seed):
    """d/dx sum(c*x + x) is c + 1 everywhere."""
    with ad.precision("float64"):
        x = Tensor(np.random.default_rng(seed).normal(size=(n, d)), requires_grad=True)
        ad.backward(ad.tsum(ad.add(ad.mul(x, c), x)))
        assert np.allclose(x.grad, c + 1)


def test_forward_determinism():
    g = np.random.default_rng(0)
    x, k = g.normal(size=(2, 3, 6, 6)), g.normal(size=(4, 3, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(k), padding=1).data
    b = ad.conv2d(Tensor(x), Tensor(k), padding=1).data
    assert a.tobytes() == b.tobytes()
