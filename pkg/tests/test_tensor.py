import numpy as np
import pytest

from pvlu import tensor
from pvlu.errors import ShapeError

from oracles import conv2d_loops, matmul_loops, maxpool_loops


class TestCreate:
    def test_zeros(self):
        np.testing.assert_array_equal(tensor.create([2, 2]), np.zeros((2, 2)))

    def test_constant(self):
        np.testing.assert_array_equal(tensor.create([3], 1.5), [1.5, 1.5, 1.5])

    def test_seeded_normal_deterministic(self):
        a = tensor.create([4], ("normal", 0, 1, 7))
        b = tensor.create([4], ("normal", 0, 1, 7))
        assert np.array_equal(a, b)
        c = tensor.create([4], ("normal", 0, 1, 8))
        assert not np.array_equal(a, c)

    def test_scalar_rank0(self):
        assert tensor.create([], 2.0).shape == ()

    @pytest.mark.parametrize("shape", [[0], [2, 0], [-1]])
    def test_bad_extent(self, shape):
        with pytest.raises(ShapeError):
            tensor.create(shape)


class TestEw:
    def test_add(self):
        np.testing.assert_array_equal(tensor.ew([1.0, 2.0], [3.0, 4.0], "add"), [4.0, 6.0])

    def test_additive_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(tensor.ew(x, np.zeros((3, 4)), "add"), x)

    def test_mul(self):
        np.testing.assert_array_equal(tensor.ew([2.0, 3.0], [2.0, 3.0], "mul"), [4.0, 9.0])

    def test_channel_broadcast_matches_tiling(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 5))
        p = rng.normal(size=3)
        tiled = np.tile(p.reshape(1, 3, 1, 1), (2, 1, 4, 5))
        for op in ("add", "sub", "mul"):
            got = tensor.ew(x, p, op)
            want = tensor.ew(x, tiled, op)
            assert np.array_equal(got, want)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            tensor.ew(np.zeros((2, 3)), np.zeros((4,)), "add")


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tensor.matmul(np.eye(2), a), a)

    def test_hand(self):
        out = tensor.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_vs_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        np.testing.assert_allclose(tensor.matmul(a, b), matmul_loops(a, b), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 1, 4, 4))
        k = np.ones((1, 1, 1, 1))
        np.testing.assert_array_equal(tensor.conv2d(x, k), x)

    def test_ones_kernel_counts(self):
        x = np.ones((1, 1, 5, 5))
        k = np.ones((1, 1, 3, 3))
        out = tensor.conv2d(x, k, padding="valid")
        np.testing.assert_allclose(out, np.full((1, 1, 3, 3), 9.0))

    def test_vs_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(tensor.conv2d(x, k), conv2d_loops(x, k), atol=1e-10)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            tensor.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), padding="valid")

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_same_padding_output_shape(self):
        x = np.zeros((1, 1, 7, 5))
        k = np.zeros((2, 1, 3, 3))
        out = tensor.conv2d(x, k, stride=1, padding="same")
        assert out.shape == (1, 2, 7, 5)
        out = tensor.conv2d(x, k, stride=2, padding="same")
        assert out.shape == (1, 2, 4, 3)

    def test_same_padding_asymmetry_right_bottom(self):
        # even kernel: the extra padding pixel must land right/bottom
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 2, 2))
        out = tensor.conv2d(x, k, stride=1, padding="same")
        want = conv2d_loops(x, k, stride=1, pads=(0, 1, 0, 1))
        np.testing.assert_allclose(out, want, atol=1e-12)


class TestMaxpool:
    def test_two_by_two(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, _ = tensor.maxpool2d(x, 2)
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_constant_image(self):
        x = np.full((1, 2, 4, 4), 3.5)
        out, _ = tensor.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out, np.full((1, 2, 2, 2), 3.5))

    def test_vs_scan_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 1, 4, 4))
        out, _ = tensor.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out, maxpool_loops(x, 2, 2))

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            tensor.maxpool2d(np.zeros((1, 1, 2, 2)), 3)


class TestRandomizedOracles:
    """matmul/conv2d/maxpool2d vs naive loops on >= 100 random instances."""

    def test_hundred_instances(self):
        rng = np.random.default_rng(6)
        for trial in range(34):
            m, k, n = rng.integers(1, 6, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            assert np.abs(tensor.matmul(a, b) - matmul_loops(a, b)).max() < 1e-10

            nb, c, h, w = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 8), rng.integers(3, 8)
            f = rng.integers(1, 4)
            kh = rng.integers(1, min(h, 3) + 1)
            kw = rng.integers(1, min(w, 3) + 1)
            stride = rng.integers(1, 3)
            x = rng.normal(size=(nb, c, h, w))
            kern = rng.normal(size=(f, c, kh, kw))
            got = tensor.conv2d(x, kern, stride=stride, padding="valid")
            want = conv2d_loops(x, kern, stride=stride)
            assert np.abs(got - want).max() < 1e-10

            win = rng.integers(1, min(h, w) + 1)
            ps = rng.integers(1, win + 1)
            got, _ = tensor.maxpool2d(x, win, ps)
            assert np.array_equal(got, maxpool_loops(x, win, ps))

    def test_determinism(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        a = tensor.conv2d(x, k, padding="same")
        b = tensor.conv2d(x.copy(), k.copy(), padding="same")
        assert np.array_equal(a, b)


class TestConvBackwardOracle:
    def test_grads_vs_finite_difference(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out, col, pads = tensor.conv2d_with_col(x, k, stride=2, padding="same")
        up = rng.normal(size=out.shape)
        dx, dk = tensor.conv2d_backward(up, col, x.shape, k, 2, pads)

        h = 1e-6
        def loss(xv, kv):
            return float((tensor.conv2d(xv, kv, stride=2, padding="same") * up).sum())

        for arr, grad in ((x, dx), (k, dk)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in rng.choice(flat.size, size=20, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss(x, k)
                flat[i] = orig - h
                fm = loss(x, k)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                assert abs(num - gflat[i]) < 1e-5 * max(1.0, abs(num))
