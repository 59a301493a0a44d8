import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuffleseg.errors import ShapeError
from shuffleseg.tensor import Shape4, as_shape, concat_channels, elementwise_add, slice_channels, tensor_new


def test_new_fills():
    assert np.array_equal(tensor_new((1, 1, 2, 2), 0), np.zeros((1, 1, 2, 2)))
    t = tensor_new((1, 3, 2, 2), 1.5)
    assert t.size == 12 and np.all(t == 1.5)
    assert t.dtype == np.float32
    assert tensor_new((1, 1, 1, 1), precision="double").dtype == np.float64


@pytest.mark.parametrize("shape", [(0, 1, 1, 1), (1, -2, 1, 1), (1, 1, 1), (2**31, 2**31, 2, 2)])
def test_bad_shapes(shape):
    with pytest.raises(ShapeError):
        as_shape(shape)


def test_shape_numel():
    assert Shape4(2, 3, 4, 5).numel() == 120


def test_add():
    a, b = tensor_new((1, 2, 3, 3), 1), tensor_new((1, 2, 3, 3), 2)
    assert np.all(elementwise_add(a, b) == 3)
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3)).astype(np.float32)
    assert np.array_equal(elementwise_add(x, np.zeros_like(x)), x)
    with pytest.raises(ShapeError):
        elementwise_add(tensor_new((1, 2, 4, 4)), tensor_new((1, 2, 4, 5)))


def test_add_rejects_mixed_precision():
    with pytest.raises(ShapeError):
        elementwise_add(tensor_new((1, 1, 1, 1)), tensor_new((1, 1, 1, 1), precision="double"))


def test_concat():
    a, b = tensor_new((1, 2, 3, 3), 1), tensor_new((1, 4, 3, 3), 2)
    assert concat_channels(a, b).shape == (1, 6, 3, 3)
    c = concat_channels(tensor_new((1, 1, 2, 2), 7), tensor_new((1, 1, 2, 2), 8))
    assert np.all(c[:, 0] == 7) and np.all(c[:, 1] == 8)
    with pytest.raises(ShapeError):
        concat_channels(tensor_new((1, 1, 2, 2)), tensor_new((1, 1, 3, 2)))


def test_slice():
    t = np.arange(24, dtype=np.float32).reshape(1, 6, 2, 2)
    assert np.array_equal(slice_channels(t, 0, 6), t)
    with pytest.raises(IndexError):
        slice_channels(t, 2, 2)
    with pytest.raises(IndexError):
        slice_channels(t, 0, 7)


dims = st.integers(1, 4)


@settings(max_examples=50, deadline=None)
@given(n=dims, c=dims, c2=dims, h=dims, w=dims, seed=st.integers(0, 2**16))
def test_concat_slice_roundtrip(n, c, c2, h, w, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, c, h, w)).astype(np.float32)
    b = rng.standard_normal((n, c2, h, w)).astype(np.float32)
    ab = concat_channels(a, b)
    assert ab.size == a.size + b.size
    assert np.array_equal(slice_channels(ab, 0, c), a)
    assert np.array_equal(slice_channels(ab, c, c + c2), b)
    assert np.array_equal(elementwise_add(a, a), elementwise_add(a, a))


@settings(max_examples=50, deadline=None)
@given(shape=st.tuples(dims, dims, dims, dims), seed=st.integers(0, 2**16))
def test_add_commutes(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    s = elementwise_add(a, b)
    assert np.array_equal(s, elementwise_add(b, a))
    assert s.size == a.size
