import numpy as np
import pytest

from fedcodebook import reference as ref
from fedcodebook.aggregation import (
    ClientUpload,
    alignment_mask,
    build_similarity_tables,
    client_similarity,
    domain_distinctiveness,
    fedavg_aggregate,
    global_aggregate_phase2,
    personalized_other_params,
    token_similarity,
    update_codebooks_phase1,
    _softmax,
)
from fedcodebook.errors import ConfigError, ContractError, DimensionError


def make_upload(cid, rng, heads=2, n_tok=3, d_h=4, max_freq=6):
    return ClientUpload(
        client_id=cid,
        tokens=rng.normal(size=(heads, n_tok, d_h)),
        counters=rng.integers(0, max_freq, size=(heads, n_tok)),
        other={"enc.w": rng.normal(size=(3, 2)), "dec.b": rng.normal(size=4)},
        sample_count=int(rng.integers(1, 50)),
    )


def make_uploads(k, seed, **kw):
    rng = np.random.default_rng(seed)
    return [make_upload(c, rng, **kw) for c in range(k)]


def bundles_close(x, y, tol):
    assert set(x) == set(y)
    for name in x:
        np.testing.assert_allclose(x[name], y[name], rtol=0, atol=tol, err_msg=name)


# --------------------------------------------------------- token similarity

def test_token_similarity_identity_on_orthonormal():
    cb = np.eye(3)
    assert np.array_equal(token_similarity(cb, cb), np.eye(3))


def test_token_similarity_scale_invariant():
    rng = np.random.default_rng(0)
    cb_a, cb_b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    base = token_similarity(cb_a, cb_b)
    doubled = cb_a.copy()
    doubled[2] *= 2.0                      # power of two: exactly representable
    assert np.array_equal(token_similarity(doubled, cb_b), base)
    scaled = cb_a.copy()
    scaled[1] *= 0.37
    np.testing.assert_allclose(token_similarity(scaled, cb_b), base,
                               rtol=0, atol=1e-12)


def test_token_similarity_zero_vector_scores_zero():
    cb_a = np.array([[0.0, 0.0], [1.0, 0.0]])
    cb_b = np.array([[1.0, 1.0], [0.0, 0.0]])
    sim = token_similarity(cb_a, cb_b)
    assert sim[0, 0] == 0.0 and sim[0, 1] == 0.0 and sim[1, 1] == 0.0


def test_token_similarity_matches_loop_oracle_and_stays_bounded():
    rng = np.random.default_rng(1)
    cb_a, cb_b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    sim = token_similarity(cb_a, cb_b)
    np.testing.assert_allclose(sim, ref.naive_token_similarity(cb_a, cb_b),
                               rtol=0, atol=1e-12)
    assert (sim <= 1.0).all() and (sim >= -1.0).all()
    parallel = token_similarity(cb_a, 3.0 * cb_a)
    assert (np.diag(parallel) <= 1.0).all()
    np.testing.assert_allclose(np.diag(parallel), 1.0, rtol=0, atol=1e-12)


def test_token_similarity_dim_mismatch():
    with pytest.raises(DimensionError):
        token_similarity(np.zeros((2, 3)), np.zeros((2, 4)))


# ----------------------------------------------------------- alignment mask

def test_alignment_mask_equal_frequencies_keeps_everything():
    s = np.random.default_rng(2).normal(size=(3, 3))
    f = np.array([4, 4, 4])
    assert np.array_equal(alignment_mask(s, f, f), s)


def test_alignment_mask_blocks_row_against_all_zero_candidates():
    s = np.ones((2, 3))
    masked = alignment_mask(s, np.array([5, 0]), np.zeros(3, dtype=int))
    assert np.all(np.isneginf(masked[0]))
    assert np.array_equal(masked[1], s[1])   # 0 >= 0 holds


def test_alignment_mask_matches_comparison_loop():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(4, 4))
    fa, fb = rng.integers(0, 5, 4), rng.integers(0, 5, 4)
    got = alignment_mask(s, fa, fb)
    want = ref.naive_alignment_mask(s, fa, fb)
    assert np.array_equal(got, want)


# --------------------------------------------------------- phase 1 codebook

def test_phase1_lambda_one_is_bit_identical():
    ups = make_uploads(3, seed=4)
    out = update_codebooks_phase1(ups, lam=1.0)
    for u, new in zip(ups, out):
        assert np.array_equal(new, u.tokens)
        assert new is not u.tokens          # caller owns a fresh copy


def test_phase1_rejects_bad_lambda():
    ups = make_uploads(2, seed=5)
    for lam in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            update_codebooks_phase1(ups, lam)


def test_phase1_identical_uploads_single_token_is_fixpoint():
    rng = np.random.default_rng(6)
    tok = rng.normal(size=(2, 1, 4))
    ctr = np.full((2, 1), 3)
    ups = [ClientUpload(c, tok.copy(), ctr.copy(), {"w": np.ones(2)}, 5)
           for c in range(3)]
    out = update_codebooks_phase1(ups, lam=0.3)
    for new in out:
        np.testing.assert_allclose(new, tok, rtol=0, atol=1e-12)


def test_phase1_hand_instance_matches_naive_materialization():
    tokens = [np.array([[[1.0, 0.0], [0.0, 1.0]]]),       # heads=1, N=2, d=2
              np.array([[[1.0, 1.0], [-1.0, 0.5]]])]
    counters = [np.array([[2, 1]]), np.array([[3, 0]])]
    ups = [ClientUpload(c, tokens[c], counters[c], {"w": np.zeros(1)}, 1)
           for c in range(2)]
    got = update_codebooks_phase1(ups, lam=0.5)
    want = ref.naive_phase1_tokens(tokens, counters, lam=0.5)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=0, atol=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.2, 0.8])
def test_phase1_random_instances_match_naive(lam):
    for seed in range(5):
        ups = make_uploads(3, seed=100 + seed)
        got = update_codebooks_phase1(ups, lam)
        want = ref.naive_phase1_tokens([u.tokens for u in ups],
                                       [u.counters for u in ups], lam)
        for g, w in zip(got, want):
            np.testing.assert_allclose(g, w, rtol=0, atol=1e-10)


def test_phase1_frequency_pattern_sufficiency_exact():
    ups = make_uploads(3, seed=7)
    base = update_codebooks_phase1(ups, lam=0.4)
    for u in ups:
        u.counters = u.counters * 7
    scaled = update_codebooks_phase1(ups, lam=0.4)
    for b, s in zip(base, scaled):
        assert np.array_equal(b, s)


def test_phase1_output_norm_bounded_by_max_upload_norm():
    for seed in range(5):
        ups = make_uploads(4, seed=200 + seed)
        out = update_codebooks_phase1(ups, lam=0.35)
        for h in range(ups[0].tokens.shape[0]):
            cap = max(np.linalg.norm(u.tokens[h], axis=1).max() for u in ups)
            for new in out:
                assert np.linalg.norm(new[h], axis=1).max() <= cap + 1e-9


def test_phase1_self_gate_keeps_denominator_alive():
    # one client, token frequencies higher than every candidate: only the
    # self pair survives, so the token maps to itself
    tok = np.array([[[2.0, 0.0]]])
    ups = [ClientUpload(0, tok, np.array([[9]]), {"w": np.zeros(1)}, 1),
           ClientUpload(1, np.array([[[0.0, 5.0]]]), np.array([[0]]),
                        {"w": np.zeros(1)}, 1)]
    out = update_codebooks_phase1(ups, lam=0.0)
    np.testing.assert_allclose(out[0], tok, rtol=0, atol=1e-12)


# --------------------------------------------------------- client similarity

def test_client_similarity_self_is_one():
    rng = np.random.default_rng(8)
    tok = rng.normal(size=(2, 4, 3))
    assert client_similarity(tok, tok) == pytest.approx(1.0, abs=1e-12)


def test_client_similarity_orthogonal_is_zero():
    a = np.zeros((1, 2, 4))
    b = np.zeros((1, 2, 4))
    a[0, 0, 0] = a[0, 1, 1] = 1.0
    b[0, 0, 2] = b[0, 1, 3] = 1.0
    assert client_similarity(a, b) == 0.0


def test_client_similarity_matches_loop_oracle():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    got = client_similarity(a, b)
    assert got == pytest.approx(ref.naive_client_similarity(a, b), abs=1e-12)


def test_similarity_tables_shape_and_diag():
    ups = make_uploads(3, seed=10)
    tables = build_similarity_tables(ups)
    assert tables.client_sim.shape == (3, 3)
    np.testing.assert_allclose(np.diag(tables.client_sim), 1.0, rtol=0, atol=1e-12)
    assert (np.abs(tables.client_sim) <= 1.0 + 1e-12).all()
    assert len(tables.token_sim) == 2 * 9   # heads x client pairs
    np.testing.assert_allclose(
        tables.distinctiveness, ref.naive_distinctiveness(tables.client_sim),
        rtol=0, atol=1e-12)


# --------------------------------------------- personalized other parameters

def test_personalized_single_client_is_identity():
    ups = make_uploads(1, seed=11)
    out = personalized_other_params(ups, np.array([[1.0]]))
    for name in ups[0].other:
        assert np.array_equal(out[0][name], ups[0].other[name])


def test_personalized_equal_similarities_is_uniform_mean():
    ups = make_uploads(3, seed=12)
    delta = np.full((3, 3), 0.6)
    out = personalized_other_params(ups, delta)
    for name in ups[0].other:
        mean = np.mean([u.other[name] for u in ups], axis=0)
        np.testing.assert_allclose(out[0][name], mean, rtol=0, atol=1e-12)


def test_personalized_hand_softmax_on_scalars():
    ups = make_uploads(3, seed=13)
    for i, u in enumerate(ups):
        u.other = {"s": np.array([float(10 * (i + 1))])}
    delta = np.array([[0.0, np.log(2.0), np.log(4.0)],
                      [0.0, 0.0, 0.0],
                      [np.log(4.0), np.log(2.0), 0.0]])
    out = personalized_other_params(ups, delta)
    assert out[0]["s"][0] == pytest.approx((10 + 2 * 20 + 4 * 30) / 7, abs=1e-12)
    assert out[1]["s"][0] == pytest.approx(20.0, abs=1e-12)
    assert out[2]["s"][0] == pytest.approx((4 * 10 + 2 * 20 + 30) / 7, abs=1e-12)


def test_personalized_matches_naive():
    rng = np.random.default_rng(14)
    ups = make_uploads(4, seed=14)
    delta = rng.uniform(-1, 1, size=(4, 4))
    got = personalized_other_params(ups, delta)
    want = ref.naive_personalized([u.other for u in ups], delta)
    for g, w in zip(got, want):
        bundles_close(g, w, 1e-10)


# ------------------------------------------------------------ distinctiveness

def test_distinctiveness_identical_clients_is_zero():
    delta = np.ones((3, 3))
    np.testing.assert_allclose(domain_distinctiveness(delta), 0.0,
                               rtol=0, atol=1e-12)


def test_distinctiveness_direct_substitution():
    delta = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(domain_distinctiveness(delta), np.array([0.5, 0.5]))


def test_distinctiveness_matches_loop():
    delta = np.random.default_rng(15).uniform(-1, 1, (5, 5))
    np.testing.assert_allclose(domain_distinctiveness(delta),
                               ref.naive_distinctiveness(delta),
                               rtol=0, atol=1e-12)


# ------------------------------------------------------------ phase 2 global

def test_global_single_client_passthrough():
    ups = make_uploads(1, seed=16)
    tokens, other = global_aggregate_phase2(ups, np.zeros(1))
    assert np.array_equal(tokens, ups[0].tokens)
    for name in other:
        assert np.array_equal(other[name], ups[0].other[name])


def test_global_equal_distinctiveness_is_plain_mean():
    ups = make_uploads(3, seed=17)
    tokens, other = global_aggregate_phase2(ups, np.full(3, 0.4))
    np.testing.assert_allclose(tokens, np.mean([u.tokens for u in ups], axis=0),
                               rtol=0, atol=1e-12)
    for name in other:
        np.testing.assert_allclose(other[name],
                                   np.mean([u.other[name] for u in ups], axis=0),
                                   rtol=0, atol=1e-12)


def test_global_hand_weights_one_two_four_sevenths():
    ups = make_uploads(3, seed=18)
    for i, u in enumerate(ups):
        u.other = {"s": np.array([float(10 * (i + 1))])}
    nabla = np.array([0.0, np.log(2.0), np.log(4.0)])
    _, other = global_aggregate_phase2(ups, nabla)
    assert other["s"][0] == pytest.approx(170.0 / 7.0, abs=1e-12)


# ------------------------------------------------------------------- fedavg

def test_fedavg_equal_counts_is_mean():
    ups = make_uploads(3, seed=19)
    for u in ups:
        u.sample_count = 5
    tokens, other = fedavg_aggregate(ups)
    np.testing.assert_allclose(tokens, np.mean([u.tokens for u in ups], axis=0),
                               rtol=0, atol=1e-12)


def test_fedavg_single_holder_takes_all():
    ups = make_uploads(3, seed=20)
    ups[0].sample_count, ups[1].sample_count, ups[2].sample_count = 7, 0, 0
    tokens, other = fedavg_aggregate(ups)
    assert np.array_equal(tokens, ups[0].tokens)


def test_fedavg_weighted_mean_arithmetic():
    ups = make_uploads(3, seed=21)
    for i, u in enumerate(ups):
        u.sample_count = i + 1
        u.other = {"s": np.array([float(10 * (i + 1))])}
    _, other = fedavg_aggregate(ups)
    assert other["s"][0] == pytest.approx(140.0 / 6.0, abs=1e-12)


def test_fedavg_rejects_zero_total():
    ups = make_uploads(2, seed=22)
    for u in ups:
        u.sample_count = 0
    with pytest.raises(ContractError):
        fedavg_aggregate(ups)


# -------------------------------------------------------------- invariants

def test_permutation_equivariance():
    rng = np.random.default_rng(23)
    ups = make_uploads(4, seed=23)
    perm = [2, 0, 3, 1]
    permuted = [ups[p] for p in perm]

    lam = 0.4
    base_cb = update_codebooks_phase1(ups, lam)
    perm_cb = update_codebooks_phase1(permuted, lam)
    for pos, p in enumerate(perm):
        np.testing.assert_allclose(perm_cb[pos], base_cb[p], rtol=0, atol=1e-12)

    tables = build_similarity_tables(ups)
    ptables = build_similarity_tables(permuted)
    base_pers = personalized_other_params(ups, tables.client_sim)
    perm_pers = personalized_other_params(permuted, ptables.client_sim)
    for pos, p in enumerate(perm):
        bundles_close(perm_pers[pos], base_pers[p], 1e-12)

    g1 = global_aggregate_phase2(ups, tables.distinctiveness)
    g2 = global_aggregate_phase2(permuted, ptables.distinctiveness)
    np.testing.assert_allclose(g1[0], g2[0], rtol=0, atol=1e-12)
    bundles_close(g1[1], g2[1], 1e-12)

    f1, f2 = fedavg_aggregate(ups), fedavg_aggregate(permuted)
    np.testing.assert_allclose(f1[0], f2[0], rtol=0, atol=1e-12)
    bundles_close(f1[1], f2[1], 1e-12)


def test_identical_upload_fixpoints():
    rng = np.random.default_rng(24)
    proto = make_upload(0, rng)
    ups = [ClientUpload(c, proto.tokens.copy(), proto.counters.copy(),
                        {k: v.copy() for k, v in proto.other.items()}, 9)
           for c in range(3)]
    tables = build_similarity_tables(ups)
    for bundle in personalized_other_params(ups, tables.client_sim):
        bundles_close(bundle, proto.other, 1e-12)
    tokens, other = global_aggregate_phase2(ups, tables.distinctiveness)
    np.testing.assert_allclose(tokens, proto.tokens, rtol=0, atol=1e-12)
    bundles_close(other, proto.other, 1e-12)
    # N > 1 codebooks only promise the norm bound under phase 1
    out = update_codebooks_phase1(ups, lam=0.5)
    for h in range(proto.tokens.shape[0]):
        cap = np.linalg.norm(proto.tokens[h], axis=1).max()
        for new in out:
            assert np.linalg.norm(new[h], axis=1).max() <= cap + 1e-9


def test_softmax_weights_are_distributions():
    rng = np.random.default_rng(25)
    for _ in range(20):
        w = _softmax(rng.uniform(-5, 5, size=rng.integers(1, 8)))
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) < 1e-12


def test_fedavg_equals_phase2_under_uniform_distinctiveness():
    ups = make_uploads(3, seed=26)
    for u in ups:
        u.sample_count = 4
    t1, o1 = fedavg_aggregate(ups)
    t2, o2 = global_aggregate_phase2(ups, np.zeros(3))
    np.testing.assert_allclose(t1, t2, rtol=0, atol=1e-12)
    bundles_close(o1, o2, 1e-12)


def test_uploads_validate_shapes():
    rng = np.random.default_rng(27)
    with pytest.raises(DimensionError):
        ClientUpload(0, rng.normal(size=(2, 3)), np.zeros((2, 3)), {}, 1)
    with pytest.raises(ContractError):
        ClientUpload(0, rng.normal(size=(1, 2, 3)), np.array([[-1, 2]]), {}, 1)
    bad = make_uploads(2, seed=28)
    bad[1].tokens = rng.normal(size=(1, 2, 3))
    with pytest.raises(DimensionError):
        update_codebooks_phase1(bad, 0.5)
