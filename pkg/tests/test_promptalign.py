import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prismsurv import diffcore as dc
from prismsurv import promptalign as pa
from prismsurv import synthgen as sg
from prismsurv import textcorpus as tc

CFG = pa.AlignConfig(d_p=16, d_attn=16, d_align=8, router_epochs=40)


@pytest.fixture(scope="module")
def corpus():
    return tc.generate_corpus(n_per_sample=5)


@pytest.fixture(scope="module")
def router(corpus):
    return pa.train_router(corpus.train, pa.AlignConfig(), seed=0)[0]


@pytest.fixture(scope="module")
def ehr():
    c = sg.generate_cohort(sg.CohortSpec(n=40, seed=1), with_images=False)
    return c.normalized_ehr()


def params64(d_img=12):
    return {k: v.astype(np.float64) for k, v in pa.init_fusion(CFG, d_img, seed=0).items()}


def test_embed_prompt_rows():
    P = pa.init_fusion(CFG, 12)
    T = {k: dc.Tensor(v) for k, v in P.items()}
    a = pa.embed_prompt("estimate the risk", T).data
    b = pa.embed_prompt("estimate the risk", T).data
    c = pa.embed_prompt("estimate a risk", T).data
    np.testing.assert_array_equal(a, b)
    assert pa.embed_prompt("risk", T).shape == (1, 16)
    assert not np.array_equal(a[1], c[1])
    np.testing.assert_array_equal(a[[0, 2]], c[[0, 2]])
    with pytest.raises(ValueError, match="empty"):
        pa.embed_prompt("", T)


def test_router_figure_prompts(router):
    a = pa.route("Design your metrics pipeline around <clinical>", router)
    np.testing.assert_array_equal(a, [1, 0, 0, 0])
    a = pa.route("Incorporate multimodal indicators from <clinical> and <physiological> information to enhance "
                 "the precision of the machine learning model", router)
    np.testing.assert_array_equal(a, [1, 1, 0, 0])
    np.testing.assert_array_equal(pa.route("predict survival for this patient", router), [0.5] * 4)


def test_router_heldout_accuracy(corpus, router):
    assert pa.router_accuracy(corpus.heldout, router) >= 0.95


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(tc.VOCAB[2:]), min_size=1, max_size=12))
def test_route_values_quantised_and_nonzero(router, words):
    a = pa.route(" ".join(words), router)
    assert set(np.unique(a)) <= {0.0, 0.5, 1.0}
    assert a.any()


def test_cross_attention_single_prompt_token_and_identical_tokens():
    P = params64()
    T = {k: dc.Tensor(v, dtype=np.float64) for k, v in P.items()}
    q = dc.Tensor(np.random.default_rng(0).normal(size=(1, 16)), dtype=np.float64)
    z = np.tile(np.random.default_rng(1).normal(size=(1, 12)), (7, 1))
    out = pa.cross_attention_fuse(q, z, T, CFG).data
    # attended value equals the (shared) key/value projection of that token
    Q = q.data @ P["wq"]
    V = z[0] @ P["wk"]
    pooled = (Q[0] + V) / 2
    h = pooled @ P["wp"] + P["bp"]
    np.testing.assert_allclose(out, (h - h.mean()) / np.sqrt(h.var() + 1e-5), atol=1e-10)


def test_cross_attention_layer_norm_contract():
    T = {k: dc.Tensor(v, dtype=np.float64) for k, v in params64().items()}
    rng = np.random.default_rng(2)
    out = pa.cross_attention_fuse(dc.Tensor(rng.normal(size=(3, 5, 16)), dtype=np.float64),
                                  rng.normal(size=(3, 9, 12)), T, CFG).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-3)
    with pytest.raises(dc.ShapeError):
        pa.cross_attention_fuse(dc.Tensor(rng.normal(size=(3, 5, 16))), rng.normal(size=(3, 9, 11)), T, CFG)


def test_ehr_group_embedding_linear_in_alpha(ehr):
    T = {k: dc.Tensor(v, dtype=np.float64) for k, v in params64().items()}
    e = ehr[:3]
    np.testing.assert_array_equal(pa.embed_ehr_groups(e, np.zeros(4), T).data, 0)
    half = pa.embed_ehr_groups(e, np.full(4, 0.5), T).data
    full = pa.embed_ehr_groups(e, np.ones(4), T).data
    np.testing.assert_allclose(full, 2 * half, rtol=0, atol=1e-12)
    one = pa.embed_ehr_groups(e, np.array([0, 1.0, 0, 0]), T).data
    idx = sg.group_indices()["physiological"]
    P = params64()
    ref = (e[:, idx, None] * P["phi.w"][idx] + P["phi.b"][idx]).mean(axis=1)
    np.testing.assert_allclose(one, ref, atol=1e-12)


def test_ehr_missing_feature_named(ehr):
    T = {k: dc.Tensor(v, dtype=np.float64) for k, v in params64().items()}
    e = ehr[:2].copy()
    e[1, 5] = np.nan
    with pytest.raises(ValueError, match=sg.FEATURE_NAMES[5]):
        pa.embed_ehr_groups(e, np.ones(4), T)


def test_visual_anchor_detached_and_constant_pool():
    P = params64()
    T = {k: dc.Tensor(v, requires_grad=True, dtype=np.float64) for k, v in P.items()}
    Z = dc.Tensor(np.tile(np.arange(12.0), (2, 5, 1)), requires_grad=True, dtype=np.float64)
    with dc.Tape() as tape:
        out = pa.visual_anchor(Z, T)
        loss = (out * out).sum()
    dc.backward(tape, loss)
    assert Z.grad is None or not np.any(Z.grad)
    h = np.arange(12.0) @ P["wr"] + P["br"]
    np.testing.assert_allclose(out.data[0], (h - h.mean()) / np.sqrt(h.var() + 1e-5), atol=1e-10)


def test_gower_examples():
    schema = pa.GowerSchema(np.array([True, True, True, True]), np.zeros(4))
    assert pa.ehr_similarity([1, 0, 1, 0], [1, 0, 1, 0], schema) == 1.0
    assert pa.ehr_similarity([1, 1, 1, 1], [0, 0, 0, 0], schema) == 0.0
    assert pa.ehr_similarity([1, 1, 0, 0], [1, 0, 1, 0], schema) == 0.5
    with pytest.raises(ValueError):
        pa.ehr_similarity([1, 0], [1, 0, 1], schema)


def test_mine_triplets_examples():
    assert len(pa.mine_triplets(np.ones((5, 5)), 0.2)) == 0
    S = np.eye(3)
    S[0, 1] = S[1, 0] = 0.9
    S[0, 2] = S[2, 0] = 0.5
    assert (0, 1, 2) in {tuple(t) for t in pa.mine_triplets(S, 0.2)}


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 10), st.integers(0, 10_000))
def test_mine_triplets_brute_force(n, seed):
    S = np.random.default_rng(seed).random((n, n))
    brute = [(i, j, k) for i, j, k in itertools.permutations(range(n), 3) if S[i, j] > S[i, k] + 0.2]
    assert [tuple(t) for t in pa.mine_triplets(S, 0.2)] == sorted(brute)


def test_triangulation_examples():
    za = dc.Tensor(np.zeros((3, 2)), dtype=np.float64)
    ze = dc.Tensor(np.array([[0, 0], [1.0, 0], [0, 1.0]]), dtype=np.float64)
    assert float(pa.triangulation_loss([(0, 1, 2)], za, ze).data) == pytest.approx(0.2, abs=1e-15)
    ze2 = dc.Tensor(np.array([[0, 0], [np.sqrt(0.2), 0], [np.sqrt(0.5), 0]]), dtype=np.float64)
    assert float(pa.triangulation_loss([(0, 1, 2)], za, ze2).data) == 0.0
    assert float(pa.triangulation_loss(np.zeros((0, 3)), za, ze).data) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_triangulation_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    A, E = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    trip = [(0, 1, 2), (3, 4, 0), (2, 0, 4)]
    v1 = float(pa.triangulation_loss(trip, dc.Tensor(A, dtype=np.float64), dc.Tensor(E, dtype=np.float64)).data)
    v2 = float(pa.triangulation_loss(trip, dc.Tensor(A @ Q, dtype=np.float64),
                                     dc.Tensor(E @ Q, dtype=np.float64)).data)
    assert v1 >= 0 and abs(v1 - v2) < 1e-6


def test_topology_examples():
    z = dc.Tensor(np.random.default_rng(0).normal(size=(4, 6)), dtype=np.float64)
    assert float(pa.topology_loss(z, z.data).data) == 0.0
    assert float(pa.topology_loss(z, z.data - 1.0).data) == pytest.approx(6.0, abs=1e-12)
    assert float(pa.topology_loss(z, z.data - 2.0).data) == pytest.approx(24.0, abs=1e-12)
    with pytest.raises(dc.ShapeError):
        pa.topology_loss(z, np.zeros((3, 6)))


def _batch(corpus, ehr, n=6, seed=0):
    rng = np.random.default_rng(seed)
    texts = [p.text for p in corpus.train[:n]]
    ids, mask = pa.pad_batch(texts)
    alpha = np.array([p.group_labels for p in corpus.train[:n]])
    schema = pa.GowerSchema.fit(ehr)
    return pa.AlignBatch(ids, mask, rng.normal(size=(n, 9, 12)), ehr[:n], alpha,
                         pa.similarity_matrix(ehr[:n], schema))


def test_stage2_loss_gradcheck(corpus, ehr):
    cfg = pa.AlignConfig(d_p=16, d_attn=16, d_align=8, mining_delta=0.05)
    b = _batch(corpus, ehr)
    assert len(pa.mine_triplets(b.S, 0.05)) > 0
    err = dc.finite_diff_check(lambda P: pa.stage2_loss(b, P, cfg)[0], params64(), max_entries=5)
    assert err < 1e-4


def test_stage2_beta_zero_is_triplet_term_and_no_wr_grad(corpus, ehr):
    cfg = pa.AlignConfig(d_p=16, d_attn=16, d_align=8, beta=0.0, mining_delta=0.05)
    b = _batch(corpus, ehr)
    P = {k: dc.Tensor(v, requires_grad=True, dtype=np.float64) for k, v in params64().items()}
    with dc.Tape() as tape:
        loss, parts = pa.stage2_loss(b, P, cfg)
    g = dc.backward(tape, loss, P)
    assert float(loss.data) == parts["triplet"]
    assert not np.any(g["wr"]) and not np.any(g["br"])


def test_sliced_wasserstein_zero_for_same_set():
    X = dc.Tensor(np.random.default_rng(0).normal(size=(6, 4)), dtype=np.float64)
    Y = dc.Tensor(X.data[::-1].copy(), dtype=np.float64)
    assert float(pa.sliced_wasserstein(X, Y, 8).data) == pytest.approx(0.0, abs=1e-12)


def test_train_stage2_toy(corpus, ehr, tmp_path):
    Z = np.random.default_rng(0).normal(size=(16, 9, 12)).astype(np.float32)
    data = pa.Stage2Data(Z, ehr[:16], np.arange(16))
    cfg = pa.AlignConfig(d_p=16, d_attn=16, d_align=8, epochs=5, batch=8, mining_delta=0.05, router_epochs=3)
    r1 = pa.train_stage2(data, np.arange(12), np.arange(12, 16), corpus, cfg, seed=0, out_dir=tmp_path)
    r2 = pa.train_stage2(data, np.arange(12), np.arange(12, 16), corpus, cfg, seed=0)
    assert r1[2][-1]["train_loss"] < r1[2][0]["train_loss"]
    assert r1[2] == r2[2]
    fusion, router, cfg2, meta, _ = pa.load_stage2(tmp_path / "checkpoint")
    assert cfg2 == cfg and meta["stage"] == "stage2"
    za = pa.align_features(Z, "predict survival", fusion, cfg2)
    assert za.shape == (16, 8) and np.isfinite(za).all()
