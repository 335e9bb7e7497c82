import numpy as np
import pytest

from fedcodebook import tensor as T
from fedcodebook import reference as ref
from fedcodebook.errors import ConfigError, ContractError, DimensionError
from fedcodebook.gradcheck import finite_difference_gradients, max_relative_error
from fedcodebook.graphs import TextAttributedGraph
from fedcodebook.model import (
    GVQDims,
    choose_mask_rows,
    count_instances,
    encode,
    from_arrays,
    init_params,
    local_train,
    loss_feat,
    loss_topo,
    pretrain_loss,
    quantize,
)
from fedcodebook.optim import Adam, make_optimizer
from fedcodebook.tensor import Tensor


def make_graph(n=5, d=3, p=0.5, seed=0, level="node", edge_feats=False):
    rng = np.random.default_rng(seed)
    src, dst = [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                src += [i, j]
                dst += [j, i]
    edges = np.array(list(zip(src, dst))).reshape(-1, 2)
    labels = {"node": rng.integers(0, 2, n),
              "edge": rng.integers(0, 2, len(edges)),
              "graph": np.array([0])}[level]
    ef = rng.normal(size=(len(edges), d)) if edge_feats else None
    return TextAttributedGraph(node_count=n, edges=edges,
                               node_features=rng.normal(size=(n, d)),
                               labels=labels, label_level=level,
                               edge_features=ef)


def make_params(d=3, d_h=4, heads=2, tokens=3, d_e=0, seed=1):
    dims = GVQDims(d=d, d_h=d_h, heads=heads, tokens_per_head=tokens, d_e=d_e)
    return init_params(dims, np.random.default_rng(seed))


# ----------------------------------------------------------------- encoder

def test_isolated_node_uses_self_term_only():
    g = TextAttributedGraph(node_count=1, edges=np.zeros((0, 2), dtype=int),
                            node_features=[[1.0, -2.0, 0.5]],
                            labels=[0], label_level="node")
    params = make_params()
    z = encode(g, params)
    x = g.node_features
    h1 = np.maximum(x @ params.enc1.self_w.data + params.enc1.bias.data, 0.0)
    h2 = h1 @ params.enc2.self_w.data + params.enc2.bias.data
    np.testing.assert_allclose(z.data, h2, rtol=0, atol=1e-12)


def test_encode_three_node_path_matches_hand_unroll():
    # nodes 0-1-2 (both directions); d = d_h = 2; hand-set weights
    g = TextAttributedGraph(node_count=3, edges=[(0, 1), (1, 0), (1, 2), (2, 1)],
                            node_features=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
                            labels=[0, 1, 0], label_level="node")
    dims = GVQDims(d=2, d_h=2, heads=1, tokens_per_head=2, d_e=0)
    arrs = {name: np.zeros(shape) for name, shape in
            [("enc1.self_w", (2, 2)), ("enc1.nbr_w", (2, 2)), ("enc1.edge_w", (0, 2)),
             ("enc1.bias", (2,)), ("enc2.self_w", (2, 2)), ("enc2.nbr_w", (2, 2)),
             ("enc2.edge_w", (0, 2)), ("enc2.bias", (2,)), ("codebook.0", (2, 2)),
             ("head_proj", (2, 2)), ("dec.w", (2, 2)), ("dec.b", (2,)),
             ("mask_vec", (2,))]}
    arrs["enc1.self_w"] = np.array([[1.0, 0.0], [0.0, 1.0]])
    arrs["enc1.nbr_w"] = np.array([[2.0, 0.0], [0.0, 2.0]])
    arrs["enc1.bias"] = np.array([0.1, -0.1])
    arrs["enc2.self_w"] = np.array([[0.5, 1.0], [1.0, 0.5]])
    arrs["enc2.nbr_w"] = np.array([[1.0, -1.0], [-1.0, 1.0]])
    params = from_arrays(dims, arrs)

    x = np.asarray(g.node_features)
    # layer 1: h_v = relu(x_v + 2 * mean(in-neighbors) + b)
    mean_in = np.array([x[1], (x[0] + x[2]) / 2.0, x[1]])
    h1 = np.maximum(x + 2.0 * mean_in + arrs["enc1.bias"], 0.0)
    # layer 2: identity activation
    mean_in2 = np.array([h1[1], (h1[0] + h1[2]) / 2.0, h1[1]])
    h2 = h1 @ arrs["enc2.self_w"] + mean_in2 @ arrs["enc2.nbr_w"]

    np.testing.assert_allclose(encode(g, params).data, h2, rtol=0, atol=1e-12)


def test_encode_matches_loop_reference_with_edge_features():
    g = make_graph(n=6, d=3, seed=4, edge_feats=True)
    params = make_params(d=3, d_h=4, d_e=3, seed=2)
    z = encode(g, params, mask_rows=[0, 3])
    z_ref = ref.naive_encode(g, params.to_arrays(), mask_rows=[0, 3])
    np.testing.assert_allclose(z.data, z_ref, rtol=0, atol=1e-12)


def test_encode_zero_mask_ratio_keeps_features():
    g = make_graph()
    params = make_params()
    assert choose_mask_rows(g.node_count, 0.0, np.random.default_rng(0)).size == 0
    a = encode(g, params).data
    b = encode(g, params, mask_rows=()).data
    assert np.array_equal(a, b)


def test_encode_mask_rows_change_output():
    g = make_graph()
    params = make_params()
    assert not np.array_equal(encode(g, params).data,
                              encode(g, params, mask_rows=[1]).data)


def test_encode_rejects_dim_mismatch():
    params = make_params(d=3)
    with pytest.raises(DimensionError):
        encode(make_graph(d=4), params)
    with pytest.raises(DimensionError):
        encode(make_graph(d=3, edge_feats=True), params)   # model has d_e=0


def test_choose_mask_rows_floor_and_bounds():
    rng = np.random.default_rng(0)
    rows = choose_mask_rows(10, 0.25, rng)
    assert rows.size == 2 and len(set(rows.tolist())) == 2
    with pytest.raises(ConfigError):
        choose_mask_rows(10, 1.0, rng)


# ---------------------------------------------------------------- quantize

def test_quantize_exact_token_match():
    params = make_params(d_h=4, heads=1, tokens=8, seed=3)
    z = Tensor(np.vstack([params.tokens[0].data[5],
                          params.tokens[0].data[2]]))
    res = quantize(z, params, count=False)
    assert res.indices[:, 0].tolist() == [5, 2]


def test_quantize_tie_prefers_lower_index():
    dims = GVQDims(d=2, d_h=2, heads=1, tokens_per_head=2)
    params = init_params(dims, np.random.default_rng(0))
    params.tokens[0].data[...] = np.array([[1.0, 0.0], [-1.0, 0.0]])
    res = quantize(Tensor([[0.0, 0.0]]), params, count=False)
    assert res.indices[0, 0] == 0
    params.tokens[0].data[...] = np.array([[0.5, 0.5], [0.5, 0.5]])
    res = quantize(Tensor([[0.3, 0.1]]), params, count=False)
    assert res.indices[0, 0] == 0


def test_quantize_matches_brute_force_scan():
    rng = np.random.default_rng(7)
    params = make_params(d_h=5, heads=2, tokens=8, seed=5)
    z = Tensor(rng.normal(size=(20, 5)))
    res = quantize(z, params, count=False)
    for h in range(2):
        expect = ref.naive_quantize_indices(z.data, params.tokens[h].data)
        assert np.array_equal(res.indices[:, h], expect)


def test_quantize_counters_increment_per_row():
    params = make_params(d_h=4, heads=2, tokens=3)
    z = Tensor(np.random.default_rng(0).normal(size=(9, 4)))
    quantize(z, params)
    assert params.counters.sum(axis=1).tolist() == [9, 9]
    quantize(z, params)   # accumulates
    assert params.counters.sum(axis=1).tolist() == [18, 18]
    quantize(z, params, count=False)
    assert params.counters.sum(axis=1).tolist() == [18, 18]


def test_quantize_empty_head_rejected():
    params = make_params(d_h=4, heads=1, tokens=2)
    params.tokens[0] = Tensor(np.zeros((0, 4)))
    with pytest.raises(ContractError):
        quantize(Tensor(np.zeros((2, 4))), params, count=False)


def test_quantize_straight_through_routing():
    params = make_params(d=3, d_h=4, heads=2, tokens=3)
    g = make_graph(d=3)
    z = encode(g, params)
    res = quantize(z, params, count=False)
    assert res.z_q.data is res.z_q_raw.data   # value path is the quantized one
    loss = T.tsum(res.z_q)
    grads = T.backward(loss, [params.enc1.self_w, params.tokens[0], params.head_proj])
    assert np.abs(grads[params.enc1.self_w]).sum() > 0     # via STE to z
    assert np.array_equal(grads[params.tokens[0]], np.zeros((3, 4)))
    assert np.array_equal(grads[params.head_proj], np.zeros((8, 4)))
    loss_raw = T.tsum(res.z_q_raw)
    graw = T.backward(loss_raw, [params.enc1.self_w, params.tokens[0], params.head_proj])
    assert np.array_equal(graw[params.enc1.self_w], np.zeros((3, 4)))
    assert np.abs(graw[params.head_proj]).sum() > 0


@pytest.mark.parametrize("trial", range(10))
def test_quantize_stable_under_small_token_perturbation(trial):
    # rows not selecting token j keep their index when j moves by less
    # than half its distance margin over the selected token
    rng = np.random.default_rng(100 + trial)
    params = make_params(d_h=3, heads=1, tokens=5, seed=trial)
    z = Tensor(rng.normal(size=(4, 3)))
    base = quantize(z, params, count=False).indices[:, 0].copy()
    dist = np.sqrt(((z.data[:, None, :] - params.tokens[0].data[None]) ** 2).sum(-1))
    j = int(rng.integers(5))
    others = [i for i in range(4) if base[i] != j]
    if not others:
        pytest.skip("every row selects the perturbed token")
    safe = min(dist[i, j] - dist[i, base[i]] for i in others)
    assert safe > 0
    bump = rng.normal(size=3)
    bump *= 0.4 * safe / np.linalg.norm(bump)
    params.tokens[0].data[j] += bump
    after = quantize(z, params, count=False).indices[:, 0]
    assert all(after[i] == base[i] for i in others)


# ------------------------------------------------------------------ losses

def test_loss_feat_perfect_reconstruction_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    assert loss_feat(x, x, gamma=2.0).item() == pytest.approx(0.0, abs=1e-15)


def test_loss_feat_opposite_reconstruction():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    neg = T.scale(x, -1.0)
    assert loss_feat(x, neg, gamma=1.0).item() == pytest.approx(2.0, abs=1e-12)


def test_loss_feat_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    got = loss_feat(Tensor(x), Tensor(y), gamma=2.0).item()
    assert got == pytest.approx(ref.naive_loss_feat(x, y, 2.0), abs=1e-12)


def test_loss_feat_rejects_nonpositive_gamma():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ConfigError):
        loss_feat(x, x, gamma=0.0)


def test_loss_topo_zero_reconstruction_gives_quarter_n_squared():
    n = 4
    a = Tensor(np.eye(n))
    x_hat = Tensor(np.zeros((n, 3)))
    assert loss_topo(a, x_hat).item() == pytest.approx(n * n / 4.0, abs=1e-12)


def test_loss_topo_saturates_toward_zero_on_strong_self_link():
    # a single node with a self-edge: sigma(|x|^2) -> 1 matches A = [1]
    a = Tensor([[1.0]])
    assert loss_topo(a, Tensor([[30.0]])).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_topo_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x_hat = rng.normal(size=(4, 3))
    a = (rng.random((4, 4)) < 0.4).astype(float)
    got = loss_topo(Tensor(a), Tensor(x_hat)).item()
    assert got == pytest.approx(ref.naive_loss_topo(a, x_hat), abs=1e-12)


def test_loss_topo_rejects_non_binary_adjacency():
    with pytest.raises(ContractError):
        loss_topo(Tensor([[0.5]]), Tensor([[1.0]]))


# ----------------------------------------------------------- pretrain loss

def test_quantization_terms_vanish_when_codebook_holds_embeddings():
    g = make_graph(n=3, d=3, seed=6)
    params = make_params(d=3, d_h=4, heads=1, tokens=3, seed=7)
    z = encode(g, params)
    params.tokens[0].data[...] = z.data
    params.head_proj.data[...] = np.eye(4)
    parts, _ = pretrain_loss(g, params, gamma=2.0, count_freq=False)
    assert parts.codebook.item() == 0.0
    assert parts.commit.item() == 0.0


def test_pretrain_loss_value_matches_loop_reference():
    g = make_graph(n=5, d=3, seed=8, edge_feats=True)
    params = make_params(d=3, d_h=4, heads=2, tokens=4, d_e=3, seed=9)
    parts, _ = pretrain_loss(g, params, gamma=2.0, mask_rows=[1, 4],
                             count_freq=False)
    want = ref.naive_pretrain_loss(g, params.to_arrays(), heads=2, gamma=2.0,
                                   mask_rows=[1, 4])
    assert parts.total.item() == pytest.approx(want, rel=1e-9)
    assert parts.codebook.item() == parts.commit.item()    # values agree, grads differ
    assert parts.total.item() >= 0.0


def test_codebook_term_sends_no_gradient_to_encoder():
    g = make_graph(n=4, d=3, seed=10)
    params = make_params(d=3, d_h=4, heads=2, tokens=3, seed=11)
    parts, _ = pretrain_loss(g, params, count_freq=False)
    enc = [params.enc1.self_w, params.enc1.nbr_w, params.enc1.bias,
           params.enc2.self_w, params.enc2.nbr_w, params.enc2.bias,
           params.mask_vec]
    for p, grad in T.backward(parts.codebook, enc).items():
        assert np.array_equal(grad, np.zeros(p.shape))


def test_commit_term_sends_no_gradient_to_codebook():
    g = make_graph(n=4, d=3, seed=12)
    params = make_params(d=3, d_h=4, heads=2, tokens=3, seed=13)
    parts, _ = pretrain_loss(g, params, count_freq=False)
    grads = T.backward(parts.commit, params.tokens + [params.head_proj])
    for p, grad in grads.items():
        assert np.array_equal(grad, np.zeros(p.shape))


def test_pretrain_loss_requires_rng_when_masking():
    g = make_graph()
    params = make_params()
    with pytest.raises(ConfigError):
        pretrain_loss(g, params, mask_ratio=0.5)


def full_loss_grad_check(g, params, mask_rows, gamma=2.0):
    """Analytic gradients vs finite differences of the frozen surrogate."""
    z = encode(g, params, mask_rows)
    parts, q = pretrain_loss(g, params, gamma=gamma, mask_rows=mask_rows,
                             count_freq=False)
    names = [n for n, _ in params.named()]
    tensors = params.tensors()
    analytic = T.backward(parts.total, tensors)

    def loss_fn(arrays):
        arrs = dict(zip(names, arrays))
        return ref.frozen_surrogate_loss(g, arrs, params.dims.heads, gamma,
                                         mask_rows, q.indices,
                                         z.data, q.z_q_raw.data)

    base = [t.data.copy() for t in tensors]
    assert loss_fn(base) == pytest.approx(parts.total.item(), rel=1e-9)
    numeric = finite_difference_gradients(loss_fn, base)
    return max_relative_error([analytic[t] for t in tensors], numeric)


def test_full_loss_gradients_match_finite_differences():
    g = make_graph(n=4, d=3, p=0.6, seed=14, edge_feats=True)
    params = make_params(d=3, d_h=4, heads=2, tokens=3, d_e=3, seed=15)
    err = full_loss_grad_check(g, params, mask_rows=np.array([0, 2]))
    assert err < 1e-4


def test_full_loss_gradients_no_edge_features_no_mask():
    g = make_graph(n=4, d=3, p=0.6, seed=16)
    params = make_params(d=3, d_h=4, heads=1, tokens=4, seed=17)
    err = full_loss_grad_check(g, params, mask_rows=np.array([], dtype=int))
    assert err < 1e-4


# ---------------------------------------------------------------- training

def test_local_train_zero_lr_keeps_params_but_counts():
    g = make_graph(n=6, d=3, seed=18)
    params = make_params(d=3, d_h=4, heads=2, tokens=3, seed=19)
    before = params.to_arrays()
    res = local_train([g], params, epochs=3, optimizer=Adam(params.tensors(), lr=0.0),
                      rng=np.random.default_rng(0), mask_ratio=0.25)
    for name, arr in params.to_arrays().items():
        assert np.array_equal(arr, before[name]), name
    assert params.counters.sum(axis=1).tolist() == [18, 18]   # 3 epochs x 6 nodes
    assert res.sample_count == 6


def test_local_train_is_deterministic():
    g = make_graph(n=6, d=3, seed=20)
    runs = []
    for _ in range(2):
        params = make_params(d=3, d_h=4, seed=21)
        local_train([g], params, epochs=2,
                    optimizer=Adam(params.tensors(), lr=1e-3),
                    rng=np.random.default_rng(5), mask_ratio=0.25)
        runs.append(params.to_arrays())
    for name in runs[0]:
        assert np.array_equal(runs[0][name], runs[1][name]), name


def test_sample_count_by_level():
    node_g = make_graph(n=7, level="node", seed=22)
    edge_g = make_graph(n=7, level="edge", seed=23)
    graph_gs = [make_graph(n=4, level="graph", seed=s) for s in (24, 25, 26)]
    assert count_instances([node_g]) == 7
    assert count_instances([edge_g]) == edge_g.edge_count
    assert count_instances(graph_gs) == 3


def test_local_train_loss_decreases_most_seeds():
    wins = 0
    for seed in range(5):
        g = make_graph(n=20, d=4, p=0.3, seed=seed)
        params = make_params(d=4, d_h=6, heads=2, tokens=4, seed=seed + 50)
        res = local_train([g], params, epochs=20,
                          optimizer=Adam(params.tensors(), lr=1e-2),
                          rng=np.random.default_rng(seed), mask_ratio=0.25)
        wins += res.loss_trace[-1] < res.loss_trace[0]
    assert wins >= 4


def test_local_train_graph_level_batching_runs_deterministically():
    gs = [make_graph(n=4, level="graph", seed=s) for s in range(5)]
    outs = []
    for _ in range(2):
        params = make_params(d=3, d_h=4, seed=30)
        res = local_train(gs, params, epochs=2,
                          optimizer=make_optimizer("sgd", params.tensors(), 1e-3),
                          rng=np.random.default_rng(1), mask_ratio=0.0,
                          batch_size=2)
        outs.append((params.to_arrays(), res.loss_trace))
    assert outs[0][1] == outs[1][1]
    for name in outs[0][0]:
        assert np.array_equal(outs[0][0][name], outs[1][0][name])
    assert len(outs[0][1]) == 2


def test_local_train_rejects_bad_epochs():
    g = make_graph()
    params = make_params()
    with pytest.raises(ConfigError):
        local_train([g], params, epochs=0,
                    optimizer=Adam(params.tensors(), 1e-3),
                    rng=np.random.default_rng(0))
