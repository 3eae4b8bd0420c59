import numpy as np
import pytest

from maxvit_unet import NumericError, ShapeError, Tensor, ops


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def loop_conv(x, w, b, stride, pad, groups):
    bsz, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    per_group = cout // groups
    for n in range(bsz):
        for o in range(cout):
            g = o // per_group
            for y in range(ho):
                for xx in range(wo):
                    win = xp[n, g * cin_g:(g + 1) * cin_g, y * stride:y * stride + k, xx * stride:xx * stride + k]
                    out[n, o, y, xx] = np.sum(win * w[o]) + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [
    (3, 4, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (4, 6, 3, 1, 0, 2), (4, 4, 3, 2, 1, 4), (3, 5, 1, 1, 0, 1),
    (3, 5, 1, 2, 0, 1), (2, 2, 2, 2, 0, 1),
])
def test_conv2d_matches_loops(backend, rng, cin, cout, k, stride, pad, groups):
    x = rng.normal(size=(2, cin, 6, 5))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    out = ops.conv2d(f64(x), f64(w), f64(b), stride, pad, groups)
    np.testing.assert_allclose(out.data, loop_conv(x, w, b, stride, pad, groups), rtol=1e-10, atol=1e-12)


def test_conv2d_unbatched_input(rng):
    x, w = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 3, 3, 3))
    out = ops.conv2d(f64(x), f64(w), padding=1)
    assert out.shape == (2, 4, 4)
    np.testing.assert_allclose(out.data, loop_conv(x[None], w, None, 1, 1, 1)[0], rtol=1e-10)


def test_conv2d_shape_errors(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(f64(rng.normal(size=(1, 3, 4, 4))), f64(rng.normal(size=(2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(f64(rng.normal(size=(1, 4, 4))), f64(rng.normal(size=(2, 4, 3, 3))), groups=3)


@pytest.mark.parametrize("k,stride,pad,h", [(2, 2, 0, 6), (3, 2, 1, 5), (3, 1, 1, 4)])
def test_conv_transpose_is_adjoint_of_conv(backend, rng, k, stride, pad, h):
    w = rng.normal(size=(4, 3, k, k))  # conv: 3 -> 4 channels, transpose: 4 -> 3
    x = rng.normal(size=(2, 3, h, h))
    y_shape = ops.conv2d(f64(x), f64(w), None, stride, pad).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(ops.conv2d(f64(x), f64(w), None, stride, pad).data * y)
    back = ops.conv_transpose2d(f64(y), f64(w), None, stride, pad)
    assert back.shape == x.shape
    assert np.isclose(lhs, np.sum(x * back.data), rtol=1e-10)


def test_conv_transpose_k2s2_places_kernels():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 2.0
    w = np.arange(4.0).reshape(1, 1, 2, 2)
    out = ops.conv_transpose2d(f64(x), f64(w), f64([0.5])).data[0, 0]
    expected = np.full((4, 4), 0.5)
    expected[2:4, 0:2] += 2.0 * w[0, 0]
    np.testing.assert_array_equal(out, expected)


def test_batchnorm_training_and_running_stats(rng):
    x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batchnorm2d(f64(x), f64(np.ones(2)), f64(np.zeros(2)), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1 - 1e-5 / (x.var(axis=(0, 2, 3)) + 1e-5), rtol=1e-6)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    ev = ops.batchnorm2d(f64(x), f64(np.ones(2)), f64(np.zeros(2)), rm, rv, training=False).data
    np.testing.assert_allclose(ev, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_layernorm_matches_formula(rng):
    x = rng.normal(size=(3, 4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(ops.layernorm(f64(x), f64(g), f64(b)).data, expected, rtol=1e-12)


def test_softmax_properties(rng):
    x = rng.normal(size=(4, 7)) * 50
    s = ops.softmax(f64(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(ops.softmax(f64(x + 1000.0)).data, s, rtol=1e-12)
    np.testing.assert_allclose(ops.log_softmax(f64(x)).data, np.log(s), rtol=1e-9, atol=1e-12)
    with pytest.raises(NumericError):
        ops.softmax(f64([[np.nan, 1.0]]))


def test_pooling(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    avg = ops.pool2d(f64(x), "avg", 2).data
    np.testing.assert_allclose(avg, x.reshape(1, 2, 2, 2, 3, 2).mean(axis=(3, 5)))
    mx = ops.pool2d(f64(x), "max", 2).data
    np.testing.assert_allclose(mx, x.reshape(1, 2, 2, 2, 3, 2).max(axis=(3, 5)))
    g = ops.global_avg_pool(f64(x))
    assert g.shape == (1, 2, 1, 1)
    with pytest.raises(ValueError):
        ops.pool2d(f64(x), "median", 2)


def test_matmul_and_linear(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(ops.matmul(f64(a), f64(b)).data, a @ b)
    with pytest.raises(ShapeError):
        ops.matmul(f64(a), f64(rng.normal(size=(3, 4, 5))))
    w, bias = rng.normal(size=(4, 6)), rng.normal(size=6)
    np.testing.assert_allclose(ops.linear(f64(a), f64(w), f64(bias)).data, a @ w + bias)


def test_mac_counter_scopes(rng):
    x = f64(rng.normal(size=(2, 3, 8, 8)))
    w = f64(rng.normal(size=(4, 3, 3, 3)))
    with ops.count_macs() as c:
        with ops.mac_scope("outer"):
            ops.conv2d(x, w, padding=1)
            with ops.mac_scope("inner"):
                ops.matmul(f64(np.ones((5, 6))), f64(np.ones((6, 7))))
    conv = 2 * 4 * 8 * 8 * 3 * 9
    assert c.total == conv + 5 * 6 * 7
    assert c.by_scope["outer"] == c.total
    assert c.by_scope["inner"] == 5 * 6 * 7
