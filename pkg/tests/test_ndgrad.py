import numpy as np
import pytest

from astn import ndgrad as nd
from astn.ndgrad import GraphError, ShapeError, Tensor

from gradcheck import numeric_grad, rel_error


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_add_componentwise():
    np.testing.assert_array_equal(nd.elementwise("add", t([1, 2]), t([3, 4])).data, [4, 6])


def test_sigmoid_zero():
    assert nd.elementwise("sigmoid", t([0.0])).data[0] == 0.5


def test_relu_subgradient():
    x = t([-1.0, 2.0], grad=True)
    y = nd.relu(x)
    y.backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_relu_gradient_at_zero_is_zero():
    x = t([0.0], grad=True)
    nd.relu(x).sum().backward()
    assert x.grad[0] == 0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        nd.add(t([1, 2]), t([1, 2, 3]))


def test_leading_axis_broadcast():
    a = t(np.ones((4, 3)), grad=True)
    b = t(np.arange(3.0).reshape(1, 3), grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, 4 * np.ones((1, 3)))
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (4, 1)))
    with pytest.raises(ShapeError):
        nd.add(t(np.ones((4, 3))), t(np.ones((4, 1))))


def test_broadcast_reduces_to_plain_when_shapes_match():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    np.testing.assert_array_equal(nd.add(t(a), t(b)).data, a + b)
    np.testing.assert_array_equal(nd.mul(t(a), t(b)).data, a * b)


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 6))
    w = np.ones((1, 1, 1, 1))
    out = nd.conv2d(t(x), t(w), t([0.0]), stride=1, pad=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_counts_neighbours():
    out = nd.conv2d(t(np.ones((1, 5, 5))), t(np.ones((1, 1, 3, 3))), t([0.0]), pad=1).data[0]
    # direct summation: each output counts the in-bounds pixels of its 3x3 window
    expected = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            expected[i, j] = sum(
                1 for di in (-1, 0, 1) for dj in (-1, 0, 1) if 0 <= i + di < 5 and 0 <= j + dj < 5
            )
    np.testing.assert_array_equal(out, expected)
    assert out[2, 2] == 9 and out[0, 0] == 4


def test_conv_rejects_nonintegral_extent():
    with pytest.raises(ShapeError):
        nd.conv2d(t(np.ones((1, 6, 6))), t(np.ones((1, 1, 3, 3))), stride=2, pad=0)


def test_conv_grad_matches_finite_difference():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    xt, wt = t(x, True), t(w, True)
    nd.conv2d(xt, wt, pad=1).sum().backward()

    def f(xx, ww):
        return nd.conv2d(t(xx), t(ww), pad=1).data.sum()

    assert rel_error(xt.grad, numeric_grad(f, [x, w], 0)) <= 1e-4
    assert rel_error(wt.grad, numeric_grad(f, [x, w], 1)) <= 1e-4


def test_strided_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 7))
    w = rng.normal(size=(1, 2, 3, 3))
    out = nd.conv2d(t(x), t(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.array([[np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[0]) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out[0], ref, atol=1e-12)


def test_pool_and_upsample():
    c = np.full((2, 4, 6), 0.37)
    np.testing.assert_allclose(nd.pool_down(t(c)).data, 0.37)
    np.testing.assert_allclose(nd.upsample2x(nd.pool_down(t(c))).data, 0.37)
    np.testing.assert_array_equal(nd.pool_down(t([[[1.0, 2.0], [3.0, 4.0]]])).data, [[[2.5]]])
    with pytest.raises(ShapeError):
        nd.pool_down(t(np.ones((1, 3, 4))))


def test_grid_sample_identity_is_exact():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 7))
    out = nd.grid_sample(t(x), t(nd.identity_grid(6, 7)))
    assert np.array_equal(out.data, x)


def test_grid_sample_integer_shift():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 6, 7))
    coords = nd.identity_grid(6, 7)
    coords[1] += 1
    out = nd.grid_sample(t(x), t(coords)).data
    np.testing.assert_array_equal(out[:, :, :-1], x[:, :, 1:])
    np.testing.assert_array_equal(out[:, :, -1], 0)


def test_grid_sample_midpoint():
    x = np.array([[[0.0, 1.0]]])
    coords = nd.identity_grid(1, 2)
    coords[1] += 0.5
    assert nd.grid_sample(t(x), t(coords)).data[0, 0, 0] == 0.5


def test_mse_values():
    z = t([0.2, 0.7])
    assert nd.mse(z, z).item() == 0
    assert nd.mse(t([0.0, 0.0]), t([1.0, 1.0])).item() == 1
    with pytest.raises(ShapeError):
        nd.mse(t([1.0]), t([1.0, 2.0]))


def test_mse_grad():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    at = t(a, True)
    nd.mse(at, t(b)).backward()
    num = numeric_grad(lambda aa: float(np.mean((aa - b) ** 2)), [a], 0)
    assert rel_error(at.grad, num) <= 1e-6


def test_backward_linear_map():
    x = t([1.0, 2.0], True)
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_backward_sigmoid_mse_chain():
    rng = np.random.default_rng(7)
    W, xv, y = rng.normal(size=(3, 4)), rng.normal(size=(1, 3)), rng.uniform(size=(1, 4))
    Wt = t(W, True)
    nd.mse(nd.sigmoid(nd.linear(t(xv), Wt)), t(y)).backward()

    def f(ww):
        return float(np.mean((1 / (1 + np.exp(-(xv @ ww))) - y) ** 2))

    assert rel_error(Wt.grad, numeric_grad(f, [W], 0)) <= 1e-4


def test_backward_twice_raises():
    x = t([1.0, 2.0], True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_requires_scalar():
    x = t([1.0, 2.0], True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_every_reachable_tensor_gets_grad():
    x = t([1.0, -2.0], True)
    h = nd.relu(x * 3.0)
    loss = nd.mean(h)
    loss.backward()
    assert h.grad is not None and h.grad.shape == h.shape
    assert x.grad is not None


def test_shared_subexpression_accumulates():
    x = t([3.0], True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_take_and_concat_grads():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
    at, bt = t(a, True), t(b, True)
    out = nd.concat([nd.take(at, [0, 1, 1]), nd.take(bt, [0, 0, 0])], axis=1)
    weights = rng.normal(size=out.shape)
    (out * weights).sum().backward()

    def f(aa, bb):
        return float(np.sum(np.concatenate([aa[[0, 1, 1]], bb[[0, 0, 0]]], axis=1) * weights))

    assert rel_error(at.grad, numeric_grad(f, [a, b], 0)) <= 1e-8
    assert rel_error(bt.grad, numeric_grad(f, [a, b], 1)) <= 1e-8


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32), requires_grad=True)
    y = nd.upsample2x(nd.pool_down(nd.sigmoid(nd.conv2d(x, w, pad=1))))
    assert y.dtype == np.float32
    nd.mean(y).backward()
    assert w.grad.dtype == np.float32
