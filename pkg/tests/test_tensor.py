import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special

from maxvit_unet import NumericError, ShapeError, Tensor, backward, no_grad
from maxvit_unet.tensor import broadcast_to, concat, dump, exp, gelu, load_dump, log, mish, pad, relu, sigmoid, \
    tanh, tsum


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_integer_input_becomes_float32():
    t = Tensor(np.arange(4))
    assert t.dtype == np.float32


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_mismatched_shapes_need_explicit_broadcast():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones((3,)))
    with pytest.raises(ShapeError):
        a + b
    out = a + broadcast_to(b.reshape(1, 3), (2, 3))
    backward(tsum(out))
    np.testing.assert_array_equal(b.grad, [2, 2, 2])


def test_gradient_accumulates_over_reuse():
    x = leaf([1.0, 2.0, 3.0])
    y = tsum(x * x + x)
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_twice_accumulates_into_leaves():
    x = leaf([1.0, -2.0])
    backward(tsum(x * 3.0))
    backward(tsum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_elementwise_values():
    x = np.linspace(-3, 3, 13)
    t = Tensor(x, dtype=np.float64)
    np.testing.assert_allclose(gelu(t).data, 0.5 * x * (1 + special.erf(x / np.sqrt(2))), rtol=1e-14)
    np.testing.assert_allclose(mish(t).data, x * np.tanh(np.log1p(np.exp(x))), rtol=1e-12)
    np.testing.assert_allclose(sigmoid(t).data, 1 / (1 + np.exp(-x)), rtol=1e-14)
    np.testing.assert_allclose(relu(t).data, np.maximum(x, 0))
    np.testing.assert_allclose(tanh(t).data, np.tanh(x))
    np.testing.assert_allclose(exp(t).data, np.exp(x))


def test_log_of_nonpositive_raises():
    with pytest.raises(NumericError):
        log(Tensor(np.array([1.0, 0.0])))


def test_mish_is_stable_for_large_inputs():
    x = Tensor(np.array([-200.0, 200.0]), dtype=np.float64)
    out = mish(x).data
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(200.0)


def test_concat_and_pad_gradients_route_back():
    a, b = leaf(np.ones((2, 2))), leaf(np.ones((2, 1)))
    out = pad(concat([a, b], axis=1), ((1, 0), (0, 2)), value=7.0)
    assert out.shape == (3, 5)
    assert out.data[0, 0] == 7.0
    w = np.arange(15.0).reshape(3, 5)
    backward(tsum(out * w))
    np.testing.assert_array_equal(a.grad, w[1:, :2])
    np.testing.assert_array_equal(b.grad, w[1:, 2:3])


def test_fancy_index_gradient_accumulates_duplicates():
    x = leaf(np.arange(4.0))
    backward(tsum(x[np.array([0, 0, 3])]))
    np.testing.assert_array_equal(x.grad, [2, 0, 0, 1])


def test_dump_roundtrip(tmp_path, rng):
    t = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    dump(t, tmp_path / "t.txt")
    back = load_dump(tmp_path / "t.txt")
    np.testing.assert_array_equal(back.data, t.data)


arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4),
                    elements=st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(arrays)
def test_sum_gradient_is_ones(a):
    x = leaf(a)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones_like(a))


@settings(max_examples=50, deadline=None)
@given(arrays, st.data())
def test_permute_reshape_roundtrip(a, data):
    axes = data.draw(st.permutations(range(a.ndim)))
    x = Tensor(a, dtype=np.float64)
    back = x.permute(*axes).permute(*np.argsort(axes)).reshape(-1).reshape(a.shape)
    np.testing.assert_array_equal(back.data, a)
