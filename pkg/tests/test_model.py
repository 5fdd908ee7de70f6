import math

import numpy as np
import pytest

from conftest import SMALL_MODEL, TINY
from oracles import batched_central_differences, central_difference
from gatrec.dataset import Interaction
from gatrec.graph import build_graph
from gatrec.model import (
    InitMode,
    LayerParams,
    ModelConfig,
    NumericError,
    TrainedModel,
    attention_coefficients,
    backward,
    forward,
    forward_state,
    gat_layer_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score,
    xavier_bound,
)
from gatrec.trainer import total_loss, total_loss_and_grad


def random_model(graph, config=ModelConfig(), seed=0):
    return init_params(seed, config, InitMode.RANDOM, n_nodes=graph.n_nodes)


def test_xavier_bound_first_layer():
    b = xavier_bound(384, 16)
    assert abs(b - 0.122474) < 5e-7
    assert abs(b - math.sqrt(6 / 400)) < 1e-15
    params, _ = init_params(3, ModelConfig(), InitMode.RANDOM, n_nodes=5)
    W = params.layers[0].W
    assert W.shape == (4, 384, 16)
    assert np.abs(W).max() <= b
    assert np.abs(W).max() > 0.9 * b


def test_init_deterministic_and_ln_identity():
    a, fa = init_params(7, ModelConfig(), InitMode.RANDOM, n_nodes=6)
    b, fb = init_params(7, ModelConfig(), InitMode.RANDOM, n_nodes=6)
    for (_, x), (_, y) in zip(a.tensors(), b.tensors()):
        assert np.array_equal(x, y)
    assert np.array_equal(fa, fb)
    for layer in a.layers:
        assert np.all(layer.gamma == 1) and np.all(layer.beta == 0)
    # random node features respect the Xavier bound for an (N, 384) matrix
    assert np.abs(fa).max() <= xavier_bound(384, 6)


def test_text_init_uses_given_features():
    feats = np.arange(7 * 384, dtype=float).reshape(7, 384)
    _, f = init_params(0, ModelConfig(), InitMode.TEXT, text_features=feats)
    assert np.array_equal(f, feats)
    with pytest.raises(ValueError):
        init_params(0, ModelConfig(), InitMode.TEXT)
    with pytest.raises(ValueError):
        init_params(0, ModelConfig(), InitMode.TEXT, text_features=np.zeros((7, 10)))


def test_layer_dims():
    assert ModelConfig().layer_dims() == [(384, 16, True), (64, 16, True), (64, 64, False)]


def test_attention_singleton_is_one():
    g = build_graph([Interaction(1, 1, 5, 0)], item_ids=[1, 2])
    e = np.random.default_rng(0).normal(size=(4, len(g.indices)))
    alpha = attention_coefficients(e, g)
    isolated = g.node_index.item(2)
    lo, hi = g.indptr[isolated], g.indptr[isolated + 1]
    assert hi - lo == 1 and np.all(alpha[:, lo] == 1.0)


def test_attention_equal_and_unequal_logits():
    g = build_graph([Interaction(1, 1, 5, 0)])
    u = g.node_index.user(1)
    lo, hi = g.indptr[u], g.indptr[u + 1]
    e = np.zeros((1, len(g.indices)))
    assert np.allclose(attention_coefficients(e, g)[0, lo:hi], [0.5, 0.5], atol=0, rtol=0)
    e[0, lo] = 1.0
    a = attention_coefficients(e, g)[0, lo:hi]
    assert abs(a[0] - 0.731059) < 5e-7 and abs(a[1] - 0.268941) < 5e-7
    assert abs(a[0] - math.e / (math.e + 1)) < 1e-15


def test_attention_dropout_keeps_rows_normalized(tiny_graph):
    e = np.random.default_rng(1).normal(size=(4, len(tiny_graph.indices)))
    keep = np.random.default_rng(2).random(e.shape) >= 0.5
    keep[:, tiny_graph.indptr[0] : tiny_graph.indptr[1]] = False  # every edge of node 0 dropped
    a = attention_coefficients(e, tiny_graph, keep)
    sums = np.add.reduceat(a, tiny_graph.indptr[:-1], axis=1)
    assert np.allclose(sums, 1, atol=1e-12)
    assert np.allclose(a[:, tiny_graph.indptr[0] : tiny_graph.indptr[1]],
                       attention_coefficients(e, tiny_graph)[:, tiny_graph.indptr[0] : tiny_graph.indptr[1]])


def test_output_dims(tiny_graph):
    p, f = random_model(tiny_graph)
    U, I = forward(tiny_graph, p, f)
    assert U.shape == (3, 64) and I.shape == (4, 64)


def test_eval_forward_pure(tiny_graph):
    p, f = random_model(tiny_graph)
    a = forward(tiny_graph, p, f)
    b = forward(tiny_graph, p, f)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_train_mode_needs_rng(tiny_graph):
    p, f = random_model(tiny_graph)
    with pytest.raises(ValueError):
        forward(tiny_graph, p, f, train_mode=True)
    a = forward(tiny_graph, p, f, True, np.random.default_rng(5))
    b = forward(tiny_graph, p, f, True, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0])


def test_permuting_insertion_order(tiny_graph):
    p, f = random_model(tiny_graph)
    U0, I0 = forward(tiny_graph, p, f)
    g2 = build_graph(TINY[::-1])
    assert g2.node_index == tiny_graph.node_index
    U1, I1 = forward(g2, p, f)
    assert np.array_equal(U0, U1) and np.array_equal(I0, I1)
    # relabelled items: features follow their entities, embeddings follow too
    relabel = {11: 24, 12: 23, 13: 22, 14: 21}
    g3 = build_graph([Interaction(x.user_id, relabel[x.item_id], x.rating, x.timestamp) for x in TINY])
    perm = [g3.node_index.user(u) for u in (1, 2, 3)] + [g3.node_index.item(relabel[i]) for i in (11, 12, 13, 14)]
    f3 = np.empty_like(f)
    f3[perm] = f
    out3 = np.concatenate(forward(g3, p, f3))
    assert np.allclose(out3[perm], np.concatenate([U0, I0]), atol=1e-12)


def test_layer_norm_statistics(tiny_graph):
    p, f = random_model(tiny_graph)
    state = forward_state(tiny_graph, p, f)
    for cache in state.layers:
        y = cache.y  # gamma = 1, beta = 0 at init, so y is the normalized vector
        assert np.allclose(y.mean(axis=1), 0, atol=1e-9)
        assert np.allclose(y.var(axis=1), 1, atol=1e-4)


def test_numeric_error_reports_layer(tiny_graph):
    p, f = random_model(tiny_graph)
    f = f.copy()
    f[2, 0] = np.inf
    with pytest.raises(NumericError, match="layer 0"):
        forward(tiny_graph, p, f)


def test_score():
    assert score([1, 2], [3, 4]) == 11
    v = np.random.default_rng(0).normal(size=8)
    assert score(v, np.zeros(8)) == 0
    w = np.random.default_rng(1).normal(size=8)
    assert score(v, w) == score(w, v)
    with pytest.raises(ValueError):
        score([1, 2], [1, 2, 3])


def test_score_gradient_is_other_vector():
    u = np.random.default_rng(0).normal(size=5)
    i = np.random.default_rng(1).normal(size=5)
    grad = [central_difference(lambda: score(u, i), u, k, 1e-6) for k in range(5)]
    assert np.allclose(grad, i, rtol=1e-8)


def test_zero_upstream_gradient(tiny_graph):
    p, f = random_model(tiny_graph)
    state = forward_state(tiny_graph, p, f)
    grads, df = backward(state, p, np.zeros((3, 64)), np.zeros((4, 64)), features_grad=True)
    assert all(not g.any() for _, g in grads.tensors())
    assert not df.any()


def test_backward_needs_state(tiny_graph):
    p, _ = random_model(tiny_graph)
    with pytest.raises(RuntimeError):
        backward(None, p, np.zeros((3, 64)), np.zeros((4, 64)))


def analytic(graph, params, features, batch, alpha=0.5, features_grad=False):
    state = forward_state(graph, params, features)
    _, d = total_loss_and_grad(batch, state.output, alpha)
    U = graph.n_users
    return backward(state, params, d[:U], d[U:], features_grad)


def test_small_model_every_entry_fd(tiny_graph, tiny_batch):
    """Reduced widths, same three-layer shape: loop-based central differences on every entry."""
    p, f = init_params(0, SMALL_MODEL, InitMode.RANDOM, n_nodes=tiny_graph.n_nodes)
    grads, df = analytic(tiny_graph, p, f, tiny_batch, features_grad=True)

    def loss():
        return total_loss(tiny_batch, forward_state(tiny_graph, p, f).output, 0.5)

    for (name, arr), (_, g) in zip(p.tensors(), grads.tensors()):
        for idx in np.ndindex(arr.shape):
            num = central_difference(loss, arr, idx)
            assert abs(num - g[idx]) <= 1e-4 * max(abs(num), abs(g[idx])) + 1e-10, (name, idx)
    for idx in np.ndindex(f.shape):
        num = central_difference(loss, f, idx)
        assert abs(num - df[idx]) <= 1e-4 * max(abs(num), abs(df[idx])) + 1e-10, idx


def test_dropout_gradient_matches_fd(tiny_graph, tiny_batch):
    """With a fixed dropout mask (same rng seed each pass) backward differentiates the dropped graph."""
    cfg = ModelConfig(input_dim=10, hidden_dim=16, dropout=0.4)
    p, f = init_params(1, cfg, InitMode.RANDOM, n_nodes=tiny_graph.n_nodes)

    def run():
        return forward_state(tiny_graph, p, f, train_mode=True, rng=np.random.default_rng(9))

    state = run()
    _, d = total_loss_and_grad(tiny_batch, state.output, 0.5)
    grads, _ = backward(state, p, d[:3], d[3:])

    def loss():
        return total_loss(tiny_batch, run().output, 0.5)

    rng = np.random.default_rng(0)
    for (name, arr), (_, g) in zip(p.tensors(), grads.tensors()):
        for _ in range(10):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            num = central_difference(loss, arr, idx)
            assert abs(num - g[idx]) <= 1e-4 * max(abs(num), abs(g[idx])) + 1e-10, (name, idx)


def test_text_features_fd_small_step(tiny_graph, tiny_batch):
    """Hashed text features are sparse and LayerNorm scales them up, so a 1e-4 step can cross
    LeakyReLU kinks; at 1e-5 the difference quotient stays on one linear piece."""
    from gatrec.dataset import ItemMeta, build_item_text
    from gatrec.embedder import hash_embed
    from gatrec.profiler import build_profiles

    items = {11: ItemMeta(11, "Toy Story", ("Animation", "Comedy"), "A cowboy doll feels replaced."),
             12: ItemMeta(12, "Heat", ("Crime", "Thriller"), "A detective hunts a thief."),
             13: ItemMeta(13, "Cats", ("Musical",), "Felines sing at night."),
             14: ItemMeta(14, "Alien", ("Horror", "Sci-Fi"), "A crew meets a creature.")}
    prof = build_profiles(TINY, items)
    f = np.stack([hash_embed(prof[u].text) for u in (1, 2, 3)]
                 + [hash_embed(build_item_text(items[i])) for i in (11, 12, 13, 14)])
    p, _ = init_params(0, ModelConfig(), InitMode.TEXT, text_features=f)
    grads, _ = analytic(tiny_graph, p, f, tiny_batch)
    for k, layer in enumerate(grads.layers):
        for name in LayerParams.FIELDS:
            a = getattr(layer, name).ravel()
            num = batched_central_differences(tiny_graph, p, f, tiny_batch, 0.5, k, name, a.size, step=1e-5)
            assert np.all(np.abs(a - num) <= 1e-4 * np.maximum(np.abs(a), np.abs(num)) + 1e-9), (k, name)


def test_checkpoint_round_trip(tmp_path, tiny_graph):
    p, f = random_model(tiny_graph, seed=4)
    U, I = forward(tiny_graph, p, f)
    model = TrainedModel(U, I, p, tiny_graph.node_index, {"seed": 4})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.meta["seed"] == 4
    assert back.node_index == tiny_graph.node_index
    assert np.array_equal(back.user_embeddings, U.astype(np.float32))
    for (_, a), (_, b) in zip(p.tensors(), back.params.tensors()):
        assert np.array_equal(a.astype(np.float32), b)
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"nope" + bytes(100))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_score_items(tiny_graph):
    p, f = random_model(tiny_graph)
    U, I = forward(tiny_graph, p, f)
    model = TrainedModel(U, I, p, tiny_graph.node_index)
    s = model.score_items(2, [14, 11])
    assert np.allclose(s, [U[1] @ I[3], U[1] @ I[0]])
    with pytest.raises(KeyError):
        model.score_items(99, [11])


def test_no_nan_over_training_steps(tiny_graph, tiny_batch):
    from gatrec.trainer import AdamWState, adamw_step

    p, f = random_model(tiny_graph)
    opt = AdamWState()
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = forward_state(tiny_graph, p, f, True, rng)
        _, d = total_loss_and_grad(tiny_batch, state.output, 0.5)
        grads, _ = backward(state, p, d[:3], d[3:])
        adamw_step([a for _, a in p.tensors()], [g for _, g in grads.tensors()], opt, 1e-2, weight_decay=1e-5)
    assert all(np.isfinite(a).all() for _, a in p.tensors())
    assert all(np.isfinite(x).all() for x in forward(tiny_graph, p, f))


def test_gat_layer_forward_shapes(tiny_graph):
    p, f = random_model(tiny_graph)
    out = gat_layer_forward(f, tiny_graph, p.layers[0])
    assert out.shape == (7, 64)
