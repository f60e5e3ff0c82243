import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, end_to_end_grads, end_to_end_loss, rel_err
from splitrec.errors import DataError, LabelError
from splitrec.featurize import FeatureVector
from splitrec.numeric import Activation, LayerParams, Rng, dense_forward
from splitrec.towers import (
    Arch,
    Batch,
    TowerParams,
    backward,
    batch_loss,
    cosine_sim,
    deserialize_tower,
    header_bytes,
    init_tower,
    item_backward,
    item_forward,
    item_forward_cached,
    serialize_tower,
    tower_backward,
    tower_forward,
    user_forward,
)


def _small(seed=0, arch="dssm", dim=12, dims=(8, 6, 5)):
    return init_tower(Rng(seed), arch, dim, dims, std=0.3)


def test_user_forward_zero_input_zero_bias():
    layers = tuple(LayerParams(np.ones((o, i)), np.zeros(o), Activation.TANH) for o, i in ((4, 6), (3, 4)))
    params = TowerParams(Arch.DSSM, layers)
    np.testing.assert_array_equal(user_forward(np.zeros(6), params), np.zeros(3))


def test_user_forward_deterministic_and_compositional():
    params = _small()
    x = Rng(1).random(12)
    a, b = user_forward(x, params), user_forward(x, params)
    np.testing.assert_array_equal(a, b)
    h = x
    for layer in params.layers:
        h = dense_forward(layer, h)
    np.testing.assert_allclose(a, h, rtol=0, atol=1e-15)


def test_forward_accepts_feature_vectors():
    params = _small()
    fv = FeatureVector(12, np.array([1, 4]), np.array([2.0, 1.0]))
    np.testing.assert_allclose(item_forward([fv], params)[0], user_forward(fv.to_dense(), params))


def test_default_dssm_widths():
    params = init_tower(Rng(0), "dssm", 50)
    assert [l.out_dim for l in params.layers] == [256, 128, 128]
    assert params.embedding_dim == 128


def test_cosine_examples():
    u = np.array([1.0, 2.0, -0.5])
    assert cosine_sim(u, u) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert cosine_sim(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.7071067811865476, abs=1e-15)


def test_cosine_zero_vector_is_finite():
    assert cosine_sim(np.zeros(3), np.ones(3)) == 0.0


def test_batch_loss_closed_form():
    items = np.array([[1.0, 0.0], [1.0, 0.0]])
    batch = Batch(None, (0, 1), items, np.array([1.0, 0.0]))
    loss, probs = batch_loss(batch, np.array([0.3, 0.0]))
    assert loss == pytest.approx(-0.5 * np.log(0.5), abs=1e-15)
    np.testing.assert_allclose(probs, [0.5, 0.5])


def test_batch_loss_requires_positive():
    with pytest.raises(LabelError):
        batch_loss(Batch(None, (0,), np.ones((1, 2)), np.zeros(1)), np.ones(2))


def test_batch_loss_permutation_invariant():
    rng = Rng(2)
    items = rng.normal(0, 1, (5, 4))
    labels = np.array([1.0, 0, 0, 1, 0])
    u = rng.normal(0, 1, 4)
    perm = rng.permutation(5)
    a, _ = batch_loss(Batch(None, range(5), items, labels), u)
    b, _ = batch_loss(Batch(None, range(5), items[perm], labels[perm]), u)
    assert a == pytest.approx(b, abs=1e-15)


@pytest.mark.parametrize("arch,dims", [("dssm", (8, 6, 5)), ("clsm", (7, 5))])
def test_end_to_end_gradients_finite_difference(arch, dims):
    rng = Rng(4)
    dim = 6 if arch == "clsm" else 12
    user = init_tower(rng.child(0), arch, dim, dims, std=0.3)
    item = init_tower(rng.child(1), arch, dim, dims, std=0.3)
    if arch == "clsm":
        x = rng.random((4, dim))
        inputs = [rng.random((n, dim)) for n in (2, 5, 3, 4)]
    else:
        x = rng.random(dim)
        inputs = rng.random((4, dim))
    labels = np.array([0.0, 1.0, 0.0, 0.0])
    gu, gv, g_emb, emb = end_to_end_grads(user, item, x, inputs, labels)
    num_u = central_difference(lambda w: end_to_end_loss(user.with_flat(w), item, x, inputs, labels), user.flat())
    num_v = central_difference(lambda w: end_to_end_loss(user, item.with_flat(w), x, inputs, labels), item.flat())
    assert rel_err(gu.flat(), num_u) < 1e-5
    assert rel_err(gv.flat(), num_v) < 1e-5


def test_cut_gradient_finite_difference():
    rng = Rng(5)
    user = _small(1)
    x = rng.random(12)
    items = rng.normal(0, 1, (4, 5))
    labels = np.array([1.0, 0.0, 0.0, 0.0])
    batch = Batch(x, (0, 1, 2, 3), items, labels)
    _, cut, loss = backward(batch, user)
    u = user_forward(x, user)

    def f(flat):
        return batch_loss(Batch(x, (0, 1, 2, 3), flat.reshape(4, 5), labels), u)[0]

    assert rel_err(cut, central_difference(f, items.ravel()).reshape(4, 5)) < 1e-5
    assert loss == pytest.approx(batch_loss(batch, u)[0], abs=1e-15)


def test_scale_direction_has_zero_gradient():
    rng = Rng(6)
    items = rng.normal(0, 1, (4, 5))
    u = rng.normal(0, 1, 5)
    labels = np.array([0.0, 1.0, 0.0, 0.0])
    from splitrec.towers import head_forward_backward

    _, _, grad_u, grad_items = head_forward_backward(u, items, labels)
    assert abs(grad_u @ u) < 1e-14
    np.testing.assert_allclose(np.einsum("ij,ij->i", grad_items, items), 0.0, atol=1e-14)


def test_perfect_prediction_gives_tiny_gradients():
    user = _small(2)
    x = np.linspace(0, 1, 12)
    u = user_forward(x, user)
    items = np.vstack([u * 1e3, -u * 1e3])
    labels = np.array([1.0, 0.0])
    # cosine is bounded, so probs are only near one-hot: scale the comparison
    grad, cut, loss = backward(Batch(x, (0, 1), items, labels), user)
    assert loss < 0.07
    other = np.vstack([u, u])
    g_flat, _, _ = backward(Batch(x, (0, 1), other, labels), user)
    assert np.abs(grad.flat()).max() < np.abs(g_flat.flat()).max() + 1e-12


def test_item_backward_zero_cut_grads():
    item = _small(3)
    cache = item_forward_cached(item, [4, 7], Rng(0).random((2, 12)))
    grads = item_backward({4: np.zeros(5), 7: np.zeros(5)}, cache, item)
    assert not grads.flat().any()


def test_item_backward_matches_monolithic():
    rng = Rng(7)
    user, item = _small(1), _small(2)
    x = rng.random(12)
    inputs = rng.random((4, 12))
    labels = np.array([0.0, 0.0, 1.0, 0.0])
    _, gv, _, _ = end_to_end_grads(user, item, x, inputs, labels)
    cache = item_forward_cached(item, [10, 11, 12, 13], inputs)
    _, cut, _ = backward(Batch(x, (10, 11, 12, 13), cache.embeddings, labels), user)
    split = item_backward(([10, 11, 12, 13], cut), cache, item)
    assert rel_err(split.flat(), gv.flat()) < 1e-10


def test_item_backward_two_clients_average():
    rng = Rng(8)
    user, item = _small(1), _small(2)
    inputs = rng.random((6, 12))
    xs = [rng.random(12), rng.random(12)]
    requests = [[0, 1, 2], [3, 4, 5]]
    labels = np.array([1.0, 0.0, 0.0])
    mono = [end_to_end_grads(user, item, xs[c], inputs[requests[c]], labels)[1].flat() for c in range(2)]
    cache = item_forward_cached(item, range(6), inputs)
    cuts = {}
    for c in range(2):
        _, cut, _ = backward(Batch(xs[c], requests[c], cache.lookup(requests[c]), labels), user)
        for i, row in zip(requests[c], cut):
            cuts[i] = row / 2
    split = item_backward(cuts, cache, item)
    assert rel_err(split.flat(), (mono[0] + mono[1]) / 2) < 1e-10


def test_item_backward_unknown_id():
    item = _small(3)
    cache = item_forward_cached(item, [1], Rng(0).random((1, 12)))
    with pytest.raises(DataError):
        item_backward({2: np.zeros(5)}, cache, item)
    with pytest.raises(DataError):
        cache.lookup([9])


@pytest.mark.parametrize("arch", ["dssm", "clsm"])
def test_serialize_roundtrip(arch):
    params = init_tower(Rng(1), arch, 9, (6, 4) if arch == "clsm" else (5, 4, 3))
    blob = serialize_tower(params)
    assert len(blob) == header_bytes(params) + 8 * params.n_params
    back = deserialize_tower(blob)
    np.testing.assert_array_equal(back.flat(), params.flat())
    assert back.arch is params.arch and back.window == params.window


def test_dropout_masks_change_forward_only_on_hidden_layers():
    from splitrec.towers import dropout_masks

    params = _small(4)
    masks = dropout_masks(params, 3, 0.5, Rng(1))
    assert masks[-1] is None
    assert all(set(np.unique(m)) <= {0.0, 2.0} for m in masks[:-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_flat_roundtrip(seed):
    params = _small(seed)
    vec = Rng(seed).normal(0, 1, params.n_params)
    np.testing.assert_array_equal(params.with_flat(vec).flat(), vec)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_backward_is_sum_over_batch(seed, n):
    rng = Rng(seed)
    params = _small(seed % 7)
    x = rng.random((n, 12))
    up = rng.normal(0, 1, (n, 5))
    _, trace = tower_forward(params, x)
    total = tower_backward(params, trace, up).flat()
    parts = np.zeros_like(total)
    for r in range(n):
        _, tr = tower_forward(params, x[r : r + 1])
        parts += tower_backward(params, tr, up[r : r + 1]).flat()
    np.testing.assert_allclose(total, parts, atol=1e-12)
