import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hitm import numerics as nx


def naive_conv(x, k, b, stride, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[c, i * stride + di, j * stride + dj] * k[o, c, di, dj]
                out[o, i, j] = acc
    return out


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 5))
    out = nx.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


def test_zero_kernel_gives_bias():
    x = np.random.default_rng(1).normal(size=(2, 6, 6))
    out = nx.conv2d_forward(x, np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]), pad=1)
    for o, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out[o] == b)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(nx.conv2d_forward(x, k, b, stride, pad),
                               naive_conv(x, k, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_batched_matches_single():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = nx.conv2d_forward(x, k, b, 1, 1)
    for i in range(4):
        np.testing.assert_array_equal(out[i], nx.conv2d_forward(x[i], k, b, 1, 1))


def test_conv_rejects_bad_shapes():
    x = np.zeros((2, 5, 5))
    with pytest.raises(ValueError, match="channels"):
        nx.conv2d_forward(x, np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="odd"):
        nx.conv2d_forward(x, np.zeros((1, 2, 2, 2)), np.zeros(1))
    with pytest.raises(ValueError, match="non-integral"):
        nx.conv2d_forward(np.zeros((2, 6, 6)), np.zeros((1, 2, 3, 3)), np.zeros(1), stride=2)
    with pytest.raises(ValueError, match="bias"):
        nx.conv2d_forward(x, np.zeros((1, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="grad_out"):
        nx.conv2d_backward(np.zeros((1, 4, 4)), x, np.zeros((1, 2, 3, 3)))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    gx, gk, gb = nx.conv2d_backward(np.zeros((3, 5, 5)), x, k, 1, 1)
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_backward_identity_kernel():
    g = np.random.default_rng(5).normal(size=(1, 4, 4))
    gx, _, _ = nx.conv2d_backward(g, np.zeros((1, 4, 4)), np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv_backward_finite_differences(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=nx.conv2d_forward(x, k, b, stride, pad).shape)

    def f_x(z):
        out = nx.conv2d_forward(z, k, b, stride, pad)
        return np.sum(out * r), nx.conv2d_backward(r, z, k, stride, pad)[0]

    def f_k(z):
        out = nx.conv2d_forward(x, z, b, stride, pad)
        return np.sum(out * r), nx.conv2d_backward(r, x, z, stride, pad)[1]

    def f_b(z):
        out = nx.conv2d_forward(x, k, z, stride, pad)
        return np.sum(out * r), nx.conv2d_backward(r, x, k, stride, pad)[2]

    assert nx.finite_difference_check(f_x, x, 1e-4) < 1e-6
    assert nx.finite_difference_check(f_k, k, 1e-4) < 1e-6
    assert nx.finite_difference_check(f_b, b, 1e-4) < 1e-6


def test_conv_linear_in_input():
    rng = np.random.default_rng(6)
    x1, x2 = rng.normal(size=(2, 2, 7, 7))
    k = rng.normal(size=(4, 2, 3, 3))
    zero = np.zeros(4)
    lhs = nx.conv2d_forward(1.7 * x1 - 0.3 * x2, k, zero, 1, 1)
    rhs = 1.7 * nx.conv2d_forward(x1, k, zero, 1, 1) - 0.3 * nx.conv2d_forward(x2, k, zero, 1, 1)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


def test_elementwise_values():
    assert nx.sigmoid_forward(np.array([0.0]))[0] == 0.5
    assert nx.leaky_relu_forward(np.array([-2.0]), 0.1)[0] == pytest.approx(-0.2, abs=1e-15)
    np.testing.assert_allclose(nx.softmax_forward(np.full(5, 3.3)), np.full(5, 0.2), atol=1e-15)


def test_sigmoid_extremes_finite():
    y = nx.sigmoid_forward(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_probability_vector(v):
    p = nx.softmax_forward(np.array(v))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_maxpool_forward_and_ties():
    x = np.array([[[1.0, 2.0, 0.0, 0.0],
                   [3.0, 4.0, 0.0, 0.0],
                   [5.0, 5.0, 1.0, 1.0],
                   [5.0, 5.0, 1.0, 1.0]]])
    np.testing.assert_array_equal(nx.maxpool2_forward(x)[0], [[4.0, 0.0], [5.0, 1.0]])
    g = nx.maxpool2_backward(np.ones((1, 2, 2)), x)
    # ties route to the first element of the window
    np.testing.assert_array_equal(g[0], [[0, 0, 1, 0], [0, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0]])
    with pytest.raises(ValueError, match="even"):
        nx.maxpool2_forward(np.zeros((1, 3, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 4))
    r = rng.normal(size=(2, 4, 4))
    # keep inputs away from the leaky kink and pool ties
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    checks = {
        "leaky": lambda z: (np.sum(nx.leaky_relu_forward(z, 0.1) * r),
                            nx.leaky_relu_backward(r, z, 0.1)),
        "sigmoid": lambda z: (np.sum(nx.sigmoid_forward(z) * r),
                              nx.sigmoid_backward(r, nx.sigmoid_forward(z))),
        "softmax": lambda z: (np.sum(nx.softmax_forward(z, axis=1) * r),
                              nx.softmax_backward(r, nx.softmax_forward(z, axis=1), axis=1)),
    }
    for name, f in checks.items():
        assert nx.finite_difference_check(f, x, 1e-4) < 1e-6, name
    # distinct values spaced 0.1 apart, so no window max is within h of a rival
    xp = (rng.permutation(32) * 0.1).reshape(2, 4, 4)
    rp = r[:, :2, :2]
    fp = lambda z: (np.sum(nx.maxpool2_forward(z) * rp), nx.maxpool2_backward(rp, z))
    assert nx.finite_difference_check(fp, xp, 1e-4) < 1e-6


def test_finite_difference_check_linear_and_sigmoid():
    x = np.random.default_rng(7).normal(size=(3, 4))
    assert nx.finite_difference_check(lambda z: (np.sum(z), np.ones_like(z)), x, 1e-4) <= 1e-10

    def f(z):
        s = nx.sigmoid_forward(np.array([z.sum()]))[0]
        return s, np.full_like(z, s * (1 - s))

    assert nx.finite_difference_check(f, x, 1e-4) < 1e-6


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_finite_difference_check_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        nx.finite_difference_check(lambda z: (np.inf, np.zeros_like(z)), np.zeros(3))
    f = lambda z: (float(np.log(z[0])), np.array([1 / z[0]]))
    with pytest.raises(ValueError, match="non-finite"):
        nx.finite_difference_check(f, np.array([1e-5]), h=1e-4)
