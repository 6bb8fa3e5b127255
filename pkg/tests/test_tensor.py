import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgmicro import tensor as T
from mgmicro.params import ParamStore, adam_step

from conftest import leaf


def conv_loop(x, w, b, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            grp = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ci, u, v] * xp[bi, grp * cg + ci, i * stride + u * dilation,
                                                             j * stride + v * dilation]
                    out[bi, oc, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = T.Tensor(np.ones((1, 1, 3, 3)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(x, T.Tensor(k), padding=1).data, x.data)


def test_conv_scalar_kernel():
    x = T.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d(x, T.Tensor([[[[2.0]]]]))
    np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])


def test_conv_dilated_matches_loop(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), dilation=2)
    assert np.abs(out.data - conv_loop(x, w, None, 1, 0, 2, 1)).max() < 1e-10


def test_conv_random_configs_match_loop(rng):
    worst = 0.0
    for _ in range(100):
        groups = int(rng.choice([1, 2]))
        cg = int(rng.integers(1, 3))
        og = int(rng.integers(1, 3))
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        size = int(rng.integers(dilation * (k - 1) + 1, 9))
        x = rng.standard_normal((2, groups * cg, size, size + 1))
        w = rng.standard_normal((groups * og, cg, k, k))
        b = rng.standard_normal(groups * og)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, padding, dilation, groups).data
        worst = max(worst, np.abs(got - conv_loop(x, w, b, stride, padding, dilation, groups)).max())
    assert worst < 1e-10


def test_conv_output_size_formula():
    x = T.Tensor(np.zeros((1, 1, 11, 9)))
    out = T.conv2d(x, T.Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1, dilation=2)
    assert out.shape[2:] == ((11 + 2 - 4 - 1) // 2 + 1, (9 + 2 - 4 - 1) // 2 + 1)


@pytest.mark.parametrize("wshape,groups", [((2, 3, 3, 3), 1), ((2, 1, 3, 3), 3), ((3, 2, 3, 3), 2)])
def test_conv_rejects_bad_shapes(wshape, groups):
    x = T.Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ValueError):
        T.conv2d(x, T.Tensor(np.zeros(wshape)), groups=groups)


@pytest.mark.parametrize("stride,padding,dilation,groups", [(1, 1, 1, 1), (2, 1, 2, 1), (1, 2, 2, 2), (2, 0, 1, 2)])
def test_conv_gradients(rng, stride, padding, dilation, groups):
    x = leaf(rng.standard_normal((2, 4, 7, 6)))
    w = leaf(rng.standard_normal((4, 4 // groups, 3, 3)))
    b = leaf(rng.standard_normal(4))
    err = T.grad_check(lambda: T.tsum(T.square(T.conv2d(x, w, b, stride, padding, dilation, groups))), [x, w, b])
    assert err < 1e-4


def test_pointwise_conv_gradient(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 5)))
    w = leaf(rng.standard_normal((2, 3, 1, 1)))
    assert T.grad_check(lambda: T.tsum(T.square(T.conv2d(x, w))), [x, w]) < 1e-4


def test_pad_replicate_values_and_gradient(rng):
    a = rng.standard_normal((1, 2, 4, 3))
    out = T.pad_replicate(T.Tensor(a), 2)
    np.testing.assert_array_equal(out.data, np.pad(a, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge"))
    x = leaf(a)
    wt = rng.standard_normal((1, 2, 8, 7))
    assert T.grad_check(lambda: T.tsum(T.mul(T.pad_replicate(x, 2), wt)), [x]) < 1e-6


# ---------------------------------------------------------------------------
# resize, pooling
# ---------------------------------------------------------------------------


@given(st.floats(-5, 5), st.integers(1, 9), st.integers(1, 9), st.integers(1, 6), st.integers(1, 6))
def test_resize_preserves_constants(c, oh, ow, h, w):
    out = T.bilinear_resize(T.Tensor(np.full((1, 1, h, w), c)), oh, ow)
    assert np.allclose(out.data, c, atol=1e-12)


def test_resize_monotone_rows():
    out = T.bilinear_resize(T.Tensor([[[[0.0, 1.0], [0.0, 1.0]]]]), 2, 4).data[0, 0]
    assert np.all(np.diff(out, axis=1) >= 0)


def test_resize_gradient():
    ramp = np.arange(16.0).reshape(1, 1, 4, 4) / 15.0
    x = leaf(ramp)
    wt = np.random.default_rng(3).standard_normal((1, 1, 8, 8))
    assert T.grad_check(lambda: T.tsum(T.square(T.mul(T.bilinear_resize(x, 8, 8), wt))), [x]) < 1e-4


def test_resize_rejects_zero_size():
    with pytest.raises(ValueError):
        T.bilinear_resize(T.Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


def test_max_pool_values_and_gradient(rng):
    a = rng.standard_normal((2, 3, 4, 6))
    ref = a.reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(T.max_pool2x2(T.Tensor(a)).data, ref)
    x = leaf(a)
    assert T.grad_check(lambda: T.tsum(T.square(T.max_pool2x2(x))), [x]) < 1e-4


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(T.Tensor(np.ones(4))).data, 0.25, atol=1e-15)
    got = T.softmax(T.Tensor([1.0, 2.0, 3.0])).data
    den = math.exp(1) + math.exp(2) + math.exp(3)
    ref = [math.exp(1) / den, math.exp(2) / den, math.exp(3) / den]
    assert max(abs(g - r) for g, r in zip(got, ref)) < 1e-12
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one(a, axis):
    s = T.softmax(T.Tensor(a), axis=axis).data
    assert np.all(np.abs(s.sum(axis=axis) - 1.0) <= 1e-12)


@given(arrays(np.float64, (4, 4), elements=st.floats(-1e3, 1e3)))
def test_relu_nonnegative_sigmoid_in_range(a):
    assert (T.relu(T.Tensor(a)).data >= 0).all()
    s = T.sigmoid(T.Tensor(a)).data
    assert ((s >= 0) & (s <= 1)).all()
    assert np.isfinite(s).all()


def test_activation_gradients(rng):
    x = leaf(rng.standard_normal((3, 4)))
    assert T.grad_check(lambda: T.tsum(T.square(T.softmax(x, axis=1))), [x]) < 1e-5
    assert T.grad_check(lambda: T.tsum(T.sigmoid(T.sigmoid(x))), [x]) < 1e-5
    y = leaf(rng.standard_normal((3, 4)) + np.sign(rng.standard_normal((3, 4))) * 0.1)
    assert T.grad_check(lambda: T.tsum(T.square(T.relu(y))), [y]) < 1e-4


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def test_linear_examples(rng):
    x = rng.standard_normal((5, 3))
    out = T.linear(T.Tensor(x), T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    b = rng.standard_normal(2)
    out = T.linear(T.Tensor(x), T.Tensor(np.zeros((2, 3))), T.Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (5, 1)))


def test_linear_matches_loop(rng):
    x = rng.standard_normal((2, 4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    got = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    ref = np.zeros((2, 4, 3))
    for i in range(2):
        for t in range(4):
            for o in range(3):
                ref[i, t, o] = b[o] + sum(x[i, t, k] * w[o, k] for k in range(5))
    assert np.abs(got - ref).max() < 1e-10


def test_linear_gradient(rng):
    x = leaf(rng.standard_normal((2, 4, 5)))
    w = leaf(rng.standard_normal((3, 5)))
    b = leaf(rng.standard_normal(3))
    assert T.grad_check(lambda: T.tsum(T.square(T.linear(x, w, b))), [x, w, b]) < 1e-6


def test_backward_simple_closures(rng):
    xv = rng.standard_normal(5)
    w = leaf(rng.standard_normal(5))
    T.backward(T.tsum(T.mul(w, xv)))
    np.testing.assert_allclose(w.grad, xv)
    w.grad = None
    T.backward(T.tsum(T.square(w)))
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_backward_accumulates_shared_nodes(rng):
    w = leaf(rng.standard_normal(3))
    y = T.square(w)
    T.backward(T.tsum(T.add(y, y)))
    np.testing.assert_allclose(w.grad, 4 * w.data)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(leaf(np.ones(3)))


def test_no_grad_records_nothing(rng):
    w = leaf(rng.standard_normal(3))
    with T.no_grad():
        y = T.square(w)
    assert not y.requires_grad


def test_shape_ops_gradients(rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.standard_normal((2, 1, 4)))
    wt = rng.standard_normal((2, 4, 4))

    def f():
        c = T.concat([a, b], axis=1)
        t = T.transpose(c, (0, 2, 1))
        r = T.reshape(t, (2, 4, 4))
        return T.tsum(T.mul(T.square(r), wt)) + T.mean(T.mul(a, b), axis=(1, 2)).sum()

    assert T.grad_check(f, [a, b]) < 1e-5


def test_matmul_broadcast_gradient(rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.standard_normal((4, 5)))
    assert T.grad_check(lambda: T.tsum(T.square(T.matmul(a, b))), [a, b]) < 1e-5


# ---------------------------------------------------------------------------
# normalisation, attention
# ---------------------------------------------------------------------------


def test_batch_norm_gradients(rng):
    x = leaf(rng.standard_normal((3, 2, 4, 4)))
    g = leaf(rng.standard_normal(2))
    b = leaf(rng.standard_normal(2))
    wt = rng.standard_normal((3, 2, 4, 4))
    for training in (True, False):
        rm, rv = np.zeros(2), np.ones(2)

        def f():
            return T.tsum(T.mul(T.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training), wt))

        assert T.grad_check(f, [x, g, b]) < 1e-4


def test_batch_norm_running_stats():
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm2d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_layer_norm_values_and_gradient(rng):
    a = rng.standard_normal((2, 3, 6))
    out = T.layer_norm(T.Tensor(a), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1, atol=1e-12)
    x, g, b = leaf(a), leaf(rng.standard_normal(6)), leaf(rng.standard_normal(6))
    wt = rng.standard_normal((2, 3, 6))
    assert T.grad_check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), wt)), [x, g, b]) < 1e-4


def test_attention_examples():
    v = np.array([[1.0, 2.0, 3.0]])
    out = T.attention(T.Tensor([[0.3, 0.1]]), T.Tensor([[1.0, 5.0]]), T.Tensor(v)).data
    np.testing.assert_allclose(out, v)
    v = np.array([[1.0, 0.0], [3.0, 4.0], [5.0, -2.0]])
    out = T.attention(T.Tensor(np.zeros((3, 2))), T.Tensor(np.ones((3, 2))), T.Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-15)
    e = math.exp(1 / math.sqrt(2))
    w = e / (e + 1)
    out = T.attention(T.Tensor(np.eye(2)), T.Tensor(np.eye(2)), T.Tensor(np.eye(2))).data
    assert abs(w - 0.6698) < 1e-4
    np.testing.assert_allclose(out[0], [w, 1 - w], atol=1e-12)


@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_attention_in_convex_hull(qk, v):
    out = T.attention(T.Tensor(qk), T.Tensor(qk[::-1].copy()), T.Tensor(v)).data
    assert np.all(out <= v.max(axis=0) + 1e-12)
    assert np.all(out >= v.min(axis=0) - 1e-12)


def test_attention_gradient_and_errors(rng):
    q, k, v = (leaf(rng.standard_normal((2, 3, 4))) for _ in range(3))
    assert T.grad_check(lambda: T.tsum(T.square(T.attention(q, k, v))), [q, k, v]) < 1e-4
    with pytest.raises(ValueError):
        T.attention(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((3, 5))), T.Tensor(np.zeros((3, 2))))


def test_grad_check_rejects_bad_eps(rng):
    x = leaf(rng.standard_normal(3))
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.tsum(x), [x], eps=1.0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    s = ParamStore()
    s.add("w", np.array([1.0, -2.0]))
    s["w"].grad = np.zeros(2)
    adam_step(s)
    np.testing.assert_array_equal(s["w"].data, [1.0, -2.0])


def test_adam_constant_gradient_moves_against_sign():
    s = ParamStore()
    s.add("w", np.array([0.0, 0.0]))
    for _ in range(10):
        s["w"].grad = np.array([2.0, -0.5])
        adam_step(s, lr=0.01)
    assert s["w"].data[0] < 0 < s["w"].data[1]


def test_adam_quadratic_bowl():
    s = ParamStore()
    s.add("w", np.array([0.0]))
    for _ in range(2000):
        s.zero_grad()
        T.backward(T.tsum(T.square(T.add(s["w"], -3.0))))
        adam_step(s, lr=0.01)
    assert abs(s["w"].data[0] - 3.0) < 1e-3
