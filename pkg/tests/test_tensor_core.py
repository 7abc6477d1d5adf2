import numpy as np
import pytest

from mpcn import tensor_core as tc
from mpcn.errors import AxisError, ShapeError


class TestAlloc:
    def test_zero_fill_default(self):
        t = tc.alloc((2, 3))
        assert t.shape == (2, 3)
        assert t.dtype == np.float32
        assert np.all(t == 0.0)

    def test_custom_fill(self):
        t = tc.alloc((4,), fill=2.5)
        np.testing.assert_allclose(t, 2.5)

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ShapeError):
            tc.alloc((2, 0))
        with pytest.raises(ShapeError):
            tc.alloc((-1, 3))
        with pytest.raises(ShapeError):
            tc.alloc(())


class TestReshape:
    def test_preserves_elements_row_major(self):
        t = tc.as_tensor(np.arange(12.0))
        r = tc.reshape(t, (3, 4))
        np.testing.assert_array_equal(r.ravel(), np.arange(12.0, dtype=np.float32))

    def test_rejects_size_mismatch(self):
        with pytest.raises(ShapeError):
            tc.reshape(tc.alloc((2, 3)), (4, 2))


class TestElementwise:
    def test_add_sub_mul(self):
        a = tc.as_tensor([[1.0, 2.0], [3.0, 4.0]])
        b = tc.as_tensor([[10.0, 20.0], [30.0, 40.0]])
        np.testing.assert_allclose(tc.elementwise("add", a, b), [[11, 22], [33, 44]])
        np.testing.assert_allclose(tc.elementwise("sub", b, a), [[9, 18], [27, 36]])
        np.testing.assert_allclose(tc.elementwise("mul", a, b), [[10, 40], [90, 160]])

    def test_max_and_scale(self):
        a = tc.as_tensor([-1.0, 0.0, 2.0])
        b = tc.as_tensor([1.0, -3.0, 2.0])
        np.testing.assert_allclose(tc.elementwise("max", a, b), [1.0, 0.0, 2.0])
        np.testing.assert_allclose(tc.scale(a, -2.0), [2.0, -0.0, -4.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            tc.elementwise("add", tc.alloc((2, 2)), tc.alloc((2, 3)))


class TestMatmul:
    def test_small_known_product(self):
        a = tc.as_tensor([[1.0, 2.0], [3.0, 4.0]])
        b = tc.as_tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(tc.matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    def test_identity(self):
        rng = np.random.default_rng(7)
        a = tc.as_tensor(rng.standard_normal((3, 5)))
        np.testing.assert_allclose(tc.matmul(a, np.eye(5, dtype=np.float32)), a, rtol=1e-6)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(tc.alloc((2, 3)), tc.alloc((4, 2)))

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            tc.matmul(tc.alloc((2, 3, 4)), tc.alloc((4, 2)))


class TestReduce:
    def test_sum_axes(self):
        t = tc.as_tensor([[1.0, 2.0], [3.0, 4.0]])
        assert tc.reduce("sum", t) == pytest.approx(10.0)
        np.testing.assert_allclose(tc.reduce("sum", t, axis=0), [4.0, 6.0])
        np.testing.assert_allclose(tc.reduce("sum", t, axis=1), [3.0, 7.0])

    def test_max_and_argmax(self):
        t = tc.as_tensor([[1.0, 5.0, 5.0], [9.0, 2.0, 0.0]])
        np.testing.assert_allclose(tc.reduce("max", t, axis=1), [5.0, 9.0])
        # argmax resolves ties toward the lowest index
        np.testing.assert_array_equal(tc.reduce("argmax", t, axis=1), [1, 0])

    def test_axis_out_of_range(self):
        with pytest.raises(AxisError):
            tc.reduce("sum", tc.alloc((2, 2)), axis=2)
