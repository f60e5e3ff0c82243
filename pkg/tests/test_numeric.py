import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitrec.errors import ShapeError
from splitrec.numeric import (
    Activation,
    LayerParams,
    Rng,
    conv1d_maxpool_backward,
    conv1d_maxpool_forward,
    count_ops,
    dense_backward,
    dense_forward,
    gaussian_init,
    log_softmax,
    softmax,
)


def _layer(rng, out, inp, act=Activation.TANH):
    return LayerParams(rng.normal(0, 0.5, (out, inp)), rng.normal(0, 0.5, out), act)


def _rel(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / scale


# dense ----------------------------------------------------------------------


def test_dense_identity():
    layer = LayerParams(np.eye(2), np.zeros(2), Activation.IDENTITY)
    np.testing.assert_array_equal(dense_forward(layer, np.array([1.0, 2.0])), [1.0, 2.0])


def test_dense_zero_tanh():
    layer = LayerParams(np.zeros((3, 4)), np.zeros(3), Activation.TANH)
    np.testing.assert_array_equal(dense_forward(layer, np.arange(4.0)), np.zeros(3))


def test_dense_tanh_value():
    layer = LayerParams(np.array([[1.0, 1.0]]), np.zeros(1), Activation.TANH)
    out = dense_forward(layer, np.array([0.5, 0.5]))
    assert out[0] == pytest.approx(0.7615941559557649, abs=1e-15)


def test_dense_shape_mismatch():
    layer = LayerParams(np.eye(2), np.zeros(2), Activation.IDENTITY)
    with pytest.raises(ShapeError):
        dense_forward(layer, np.ones(3))


def test_layer_params_validation():
    with pytest.raises(ShapeError):
        LayerParams(np.eye(2), np.zeros(3), Activation.TANH)


def test_dense_backward_linear_outer():
    layer = LayerParams(np.array([[2.0, -1.0, 0.5]]), np.zeros(1), Activation.IDENTITY)
    x = np.array([1.0, 2.0, 3.0])
    gw, gb, gx = dense_backward(layer, x, np.array([1.0]))
    np.testing.assert_array_equal(gw, np.outer([1.0], x))
    np.testing.assert_array_equal(gb, [1.0])
    np.testing.assert_array_equal(gx, layer.weights[0])


def test_dense_backward_zero_upstream():
    rng = Rng(3).child(0)
    layer = _layer(rng, 4, 5)
    gw, gb, gx = dense_backward(layer, rng.normal(0, 1, 5), np.zeros(4))
    assert not gw.any() and not gb.any() and not gx.any()


@pytest.mark.parametrize("act", list(Activation))
def test_dense_backward_finite_difference(act):
    rng = Rng(11)
    layer = _layer(rng, 3, 4, act)
    x = rng.normal(0, 1, 4)
    up = rng.normal(0, 1, 3)
    gw, gb, gx = dense_backward(layer, x, up)
    h = 1e-6
    obj = lambda lay, xx: float(up @ dense_forward(lay, xx))
    num_w = np.zeros_like(layer.weights)
    for idx in np.ndindex(layer.weights.shape):
        wp, wm = layer.weights.copy(), layer.weights.copy()
        wp[idx] += h
        wm[idx] -= h
        num_w[idx] = (obj(LayerParams(wp, layer.bias, act), x) - obj(LayerParams(wm, layer.bias, act), x)) / (2 * h)
    num_x = np.array([(obj(layer, x + h * e) - obj(layer, x - h * e)) / (2 * h) for e in np.eye(4)])
    num_b = np.array(
        [(obj(LayerParams(layer.weights, layer.bias + h * e, act), x) - obj(LayerParams(layer.weights, layer.bias - h * e, act), x)) / (2 * h) for e in np.eye(3)]
    )
    assert _rel(gw, num_w) < 1e-6
    assert _rel(gb, num_b) < 1e-6
    assert _rel(gx, num_x) < 1e-6


def test_dense_op_count():
    rng = Rng(0)
    layer = _layer(rng, 3, 5)
    with count_ops() as c:
        dense_forward(layer, rng.normal(0, 1, (4, 5)))
    assert c.ops == 4 * 3 * 5
    with count_ops() as c:
        dense_backward(layer, rng.normal(0, 1, (4, 5)), np.ones((4, 3)))
    assert c.ops == 2 * 4 * 3 * 5
    with count_ops() as c:
        dense_backward(layer, rng.normal(0, 1, (4, 5)), np.ones((4, 3)), need_input_grad=False)
    assert c.ops == 4 * 3 * 5


def test_count_ops_nesting():
    layer = LayerParams(np.ones((2, 2)), np.zeros(2), Activation.IDENTITY)
    with count_ops() as outer:
        dense_forward(layer, np.ones(2))
        with count_ops() as inner:
            dense_forward(layer, np.ones(2))
    assert inner.ops == 4
    assert outer.ops == 8


# conv -----------------------------------------------------------------------


def _conv_layer(rng, filters, dim, window=3):
    return LayerParams(rng.normal(0, 0.5, (filters, dim * window)), rng.normal(0, 0.5, filters), Activation.TANH)


def test_conv_constant_sequence():
    rng = Rng(5)
    layer = _conv_layer(rng, 4, 3)
    row = rng.normal(0, 1, 3)
    out = conv1d_maxpool_forward(layer, np.tile(row, (6, 1)))
    np.testing.assert_allclose(out, np.tanh(layer.weights @ np.tile(row, 3) + layer.bias), atol=1e-15)


def test_conv_single_position():
    rng = Rng(6)
    layer = _conv_layer(rng, 5, 4)
    tok = rng.normal(0, 1, 4)
    padded = np.concatenate([tok, np.zeros(8)])
    expected = np.tanh(layer.weights @ padded + layer.bias)
    np.testing.assert_allclose(conv1d_maxpool_forward(layer, tok[None, :]), expected, atol=1e-15)


def _conv_obj(layer, seq, up):
    return float(up @ conv1d_maxpool_forward(layer, seq))


def test_conv_backward_finite_difference():
    rng = Rng(8)
    layer = _conv_layer(rng, 4, 3)
    seq = rng.normal(0, 1, (5, 3))
    up = rng.normal(0, 1, 4)
    gw, gb, gs = conv1d_maxpool_backward(layer, seq, up)
    h = 1e-6
    num_w = np.zeros_like(layer.weights)
    for idx in np.ndindex(layer.weights.shape):
        wp, wm = layer.weights.copy(), layer.weights.copy()
        wp[idx] += h
        wm[idx] -= h
        num_w[idx] = (_conv_obj(LayerParams(wp, layer.bias, layer.activation), seq, up) - _conv_obj(LayerParams(wm, layer.bias, layer.activation), seq, up)) / (2 * h)
    num_s = np.zeros_like(seq)
    for idx in np.ndindex(seq.shape):
        sp, sm = seq.copy(), seq.copy()
        sp[idx] += h
        sm[idx] -= h
        num_s[idx] = (_conv_obj(layer, sp, up) - _conv_obj(layer, sm, up)) / (2 * h)
    assert _rel(gw, num_w) < 1e-5
    assert _rel(gs, num_s) < 1e-5
    assert gs.shape == seq.shape


def test_conv_non_argmax_positions_get_no_gradient():
    # filter only looks at the first feature of the first window slot
    w = np.zeros((1, 3))
    w[0, 0] = 1.0
    layer = LayerParams(w, np.zeros(1), Activation.IDENTITY)
    seq = np.array([[0.1], [0.9], [0.3], [0.2], [0.0]])
    _, _, gs = conv1d_maxpool_backward(layer, seq, np.ones(1))
    np.testing.assert_array_equal(gs[:, 0], [0.0, 1.0, 0.0, 0.0, 0.0])


def test_conv_tie_goes_to_lowest_position():
    w = np.zeros((1, 3))
    w[0, 0] = 1.0
    layer = LayerParams(w, np.zeros(1), Activation.IDENTITY)
    seq = np.array([[0.5], [0.5], [0.5], [0.5]])
    gw, _, gs = conv1d_maxpool_backward(layer, seq, np.ones(1))
    np.testing.assert_array_equal(gs[:, 0], [1.0, 0.0, 0.0, 0.0])
    assert np.count_nonzero(gs) == 1


# softmax ------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3], rtol=1e-15)


def test_softmax_empty():
    with pytest.raises(ShapeError):
        softmax(np.array([]))


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_softmax_is_distribution(xs):
    p = softmax(np.array(xs))
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(np.array(xs))), p, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(xs, c):
    x = np.array(xs)
    np.testing.assert_allclose(softmax(x + c), softmax(x), atol=1e-9)


# rng / init -----------------------------------------------------------------


def test_gaussian_init_deterministic():
    a = gaussian_init(Rng(42).child(1), 2, 2)
    b = gaussian_init(Rng(42).child(1), 2, 2)
    np.testing.assert_array_equal(a, b)


def test_gaussian_init_statistics():
    w = gaussian_init(Rng(1), 100, 1000)
    assert 0.095 <= w.std() <= 0.105
    assert abs(w.mean()) < 0.005


def test_gaussian_init_zero_std():
    assert not gaussian_init(Rng(1), 3, 4, std=0.0).any()


def test_rng_children_are_independent_of_order():
    root = Rng(9)
    a1 = root.child(1, 2).random(5)
    root.child(3).random(100)
    a2 = root.child(1, 2).random(5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(root.child(1, 2).random(5), root.child(2, 1).random(5))


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
def test_dense_batch_matches_rows(out, inp, n):
    rng = Rng(out * 100 + inp)
    layer = _layer(rng, out, inp)
    x = rng.normal(0, 1, (n, inp))
    batch = dense_forward(layer, x)
    rows = np.vstack([dense_forward(layer, r) for r in x])
    np.testing.assert_allclose(batch, rows, atol=1e-14)
