import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from spritz.tensor import (GraphError, ModelGraph, OpNode, ShapeError, Tensor, backward, forward,
                           grad_check, ops)
from spritz.tensor import _fallback, kernels


def dense_node(w, b):
    return OpNode("dense", {"w": Tensor(np.asarray(w, float)), "b": Tensor(np.asarray(b, float))})


def conv_node(w, b, stride=1):
    return OpNode("conv2d", {"w": Tensor(w), "b": Tensor(b)}, {"stride": stride})


def test_flatten_identity_graph():
    g = ModelGraph("id", (2, 2), [OpNode("flatten")])
    out = forward(g, np.ones((2, 2)))
    assert out.data.tolist() == [[1.0, 1.0, 1.0, 1.0]]


def test_dense_identity_weights():
    g = ModelGraph("d", (2,), [dense_node(np.eye(2), np.zeros(2))])
    assert forward(g, np.array([3.0, -1.0])).data.tolist() == [[3.0, -1.0]]


def test_conv_all_ones_center_is_nine():
    g = ModelGraph("c", (3, 3, 1), [conv_node(np.ones((3, 3, 1, 1)), np.zeros(1))])
    out = forward(g, np.ones((3, 3, 1)))
    assert out.data[0, 1, 1, 0] == 9.0
    # corners see four in-bounds taps under zero padding
    assert out.data[0, 0, 0, 0] == 4.0


def test_mse_of_scalar_has_derivative_six():
    x = Tensor(np.array(3.0), requires_grad=True)
    ops.mse(x, 0.0).backward()
    assert x.grad == pytest.approx(6.0)


def test_sigmoid_slope_at_zero():
    x = Tensor(np.zeros((1, 1)), requires_grad=True)
    ops.dot(ops.sigmoid(x), np.ones((1, 1))).backward()
    assert x.grad[0, 0] == 0.25


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [5, 8])
def test_conv_matches_scipy_correlate(stride, size):
    rng = np.random.default_rng(stride * 10 + size)
    x = rng.normal(size=(2, size, size, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride).data
    ho = -(-size // stride)
    pad_total = max((ho - 1) * stride + 3 - size, 0)
    before = pad_total // 2
    padded = np.pad(x, ((0, 0), (before, pad_total - before + 2), (before, pad_total - before + 2), (0, 0)))
    for n in range(2):
        for co in range(4):
            ref = sum(correlate(padded[n, :, :, ci], w[:, :, ci, co], mode="valid") for ci in range(3))
            ref = ref[::stride, ::stride][:ho, :ho] + b[co]
            assert np.allclose(out[n, :, :, co], ref, atol=1e-12)


def test_transposed_conv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    y = rng.normal(size=(2, 4, 4, 5))
    conv = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(5)), 2).data
    # conv_transpose2d takes (3, 3, c_out, c_in) = the forward kernel read backwards
    tconv = ops.conv_transpose2d(Tensor(y), Tensor(w), Tensor(np.zeros(3)), 2).data
    assert tconv.shape == x.shape
    assert np.isclose((conv * y).sum(), (x * tconv).sum(), rtol=1e-12)


def test_maxpool_tie_routes_gradient_to_first_element():
    x = Tensor(np.full((1, 2, 2, 1), 5.0), requires_grad=True)
    rec = []
    out = ops.maxpool2x2(x, rec)
    ops.dot(out, np.ones((1, 1, 1, 1))).backward()
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert rec[0][2].all()


def test_batchnorm_training_gradient_matches_differences():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 3, 3, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    probe = rng.normal(size=x0.shape)

    def value(xv):
        state = {"mean": np.zeros(2), "var": np.ones(2)}
        return (ops.batchnorm(Tensor(xv), Tensor(gamma), Tensor(beta), state, True).data * probe).sum()

    x = Tensor(x0.copy(), requires_grad=True)
    state = {"mean": np.zeros(2), "var": np.ones(2)}
    ops.dot(ops.batchnorm(x, Tensor(gamma), Tensor(beta), state, True), probe).backward()
    h = 1e-6
    num = np.zeros_like(x0)
    for i in np.ndindex(x0.shape):
        up, dn = x0.copy(), x0.copy()
        up[i] += h
        dn[i] -= h
        num[i] = (value(up) - value(dn)) / (2 * h)
    assert np.allclose(x.grad, num, atol=1e-7)
    # running statistics blend with momentum 0.9
    assert np.allclose(state["mean"], 0.1 * x0.mean(axis=(0, 1, 2)))


def test_concat_preserves_order_and_width():
    parts = [Tensor(np.arange(a, dtype=float)[None] + 10 * i) for i, a in enumerate((1728, 512, 512))]
    out = ops.concat(parts)
    assert out.shape == (1, 2752)
    assert np.array_equal(out.data[0], np.concatenate([p.data[0] for p in parts]))


def test_backward_before_forward_is_an_error():
    g = ModelGraph("d", (2,), [dense_node(np.eye(2), np.zeros(2))])
    with pytest.raises(GraphError):
        backward(g, Tensor(np.array(0.0)))


def test_backward_returns_input_and_parameter_grads():
    g = ModelGraph("d", (2,), [dense_node([[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0])])
    x = Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
    grads = backward(g, ops.dot(forward(g, x), np.ones((1, 2))))
    assert grads["input"].tolist() == [[3.0, 7.0]]
    assert grads["0.dense.b"].tolist() == [1.0, 1.0]


def test_shape_mismatch_names_the_node():
    g = ModelGraph("bad", (4,), [OpNode("flatten"), dense_node(np.ones((3, 2)), np.zeros(2))])
    with pytest.raises(ShapeError, match="node 1"):
        forward(g, np.ones(4))
    with pytest.raises(ShapeError):
        forward(g, np.ones(5))


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(1)
    g = ModelGraph("c", (6, 6, 1), [conv_node(rng.normal(size=(3, 3, 1, 2)), np.zeros(2)), OpNode("relu"),
                                    OpNode("maxpool2x2"), OpNode("flatten")])
    x = rng.normal(size=(6, 6, 1))
    assert np.array_equal(forward(g, x).data, forward(g, x).data)


def test_grad_check_linear_graph_is_exact():
    rng = np.random.default_rng(2)
    g = ModelGraph("lin", (5,), [dense_node(rng.normal(size=(5, 3)), rng.normal(size=3))])
    rep = grad_check(g, rng.normal(size=5))
    assert rep.passed
    assert rep.max_rel_error < 1e-8


def test_grad_check_two_layer_net():
    rng = np.random.default_rng(4)
    g = ModelGraph("mlp", (6,), [dense_node(rng.normal(size=(6, 8)), rng.normal(size=8)), OpNode("relu"),
                                 dense_node(rng.normal(size=(8, 2)), rng.normal(size=2)), OpNode("sigmoid")])
    rep = grad_check(g, rng.normal(size=6), param_samples=8)
    assert rep.passed, rep.as_dict()


def test_grad_check_excludes_maxpool_ties():
    g = ModelGraph("pool", (2, 2, 1), [OpNode("maxpool2x2"), OpNode("flatten")])
    rep = grad_check(g, np.full((2, 2, 1), 1.0))
    assert rep.n_excluded >= 1
    assert rep.max_rel_error == 0.0


def test_grad_check_catches_a_wrong_backward(monkeypatch):
    rng = np.random.default_rng(5)
    g = ModelGraph("s", (4,), [dense_node(rng.normal(size=(4, 3)), np.zeros(3)), OpNode("sigmoid")])
    real = ops._sigmoid

    # same forward, backward off by a factor of two
    def sigmoid_x2(x):
        s = real(x.data)

        def bw(gr):
            x._accumulate(2.0 * gr * s * (1 - s))
        return ops.make_result(s, (x,), bw)

    monkeypatch.setattr(ops, "sigmoid", sigmoid_x2)
    rep = grad_check(g, rng.normal(size=4))
    assert not rep.passed


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
def test_compiled_and_fallback_kernels_agree():
    from spritz.tensor import _kernels
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 9, 7, 3))
    for stride, pt, pl, ho, wo in [(1, 1, 1, 9, 7), (2, 0, 1, 5, 4)]:
        a = _kernels.im2col3x3(x, stride, pt, pl, ho, wo)
        b = _fallback.im2col3x3(x, stride, pt, pl, ho, wo)
        assert np.array_equal(a, b)
        ca = _kernels.col2im3x3(a, 2, 9, 7, 3, stride, pt, pl, ho, wo)
        cb = _fallback.col2im3x3(a, 2, 9, 7, 3, stride, pt, pl, ho, wo)
        assert np.allclose(ca, cb, atol=1e-12)
    y = rng.integers(0, 3, size=(2, 6, 6, 2)).astype(float)
    for pa, pb in zip(_kernels.maxpool2x2_forward(y), _fallback.maxpool2x2_forward(y)):
        assert np.array_equal(pa, pb)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(z):
    assert np.allclose(ops.softmax(z).sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(0, 1))
def test_bce_is_finite_for_extreme_logits(z, y):
    t = Tensor(np.array([[z]]), requires_grad=True)
    loss = ops.binary_cross_entropy(t, [y])
    loss.backward()
    assert np.isfinite(loss.data) and np.all(np.isfinite(t.grad))


def _grid_net(rng):
    bn = OpNode("batchnorm", {"gamma": Tensor(rng.uniform(0.5, 1.5, 4)), "beta": Tensor(rng.normal(size=4))})
    bn.state = {"mean": rng.normal(size=4), "var": rng.uniform(0.5, 2, 4)}
    return ModelGraph("grid", (8, 8, 1), [
        OpNode("scale", attrs={"factor": 1 / 127.5, "offset": -1.0}),
        conv_node(rng.normal(size=(3, 3, 1, 4)) / 3, np.zeros(4), stride=2), bn, OpNode("relu"),
        OpNode("flatten"), dense_node(rng.normal(size=(64, 16)) / 8, np.zeros(16)),
        OpNode("scale", attrs={"factor": 127.5, "offset": 127.5}),
    ])


def test_grad_check_on_grid_inputs_passes():
    rng = np.random.default_rng(9)
    rep = grad_check(_grid_net(rng), rng.uniform(20, 235, size=(8, 8, 1)), input_scale=255.0, param_samples=6)
    assert rep.passed, rep.as_dict()
    assert rep.n_resolution_limited < rep.n_checked // 4


def test_grad_check_catches_a_small_backward_error(monkeypatch):
    # a 0.1% error in one backward pass must not hide under the resolution floor
    real = ops.batchnorm

    def batchnorm_off(x, gamma, beta, state, training, **kw):
        out = real(x, gamma, beta, state, training, **kw)
        bw = out._backward
        out._backward = lambda g: bw(g * 1.001)
        return out

    monkeypatch.setattr(ops, "batchnorm", batchnorm_off)
    rng = np.random.default_rng(9)
    rep = grad_check(_grid_net(rng), rng.uniform(20, 235, size=(8, 8, 1)), input_scale=255.0)
    assert not rep.passed
    assert rep.max_rel_error > 5e-4
