import random
from types import SimpleNamespace

import numpy as np
import pytest

from gcgsim import autodiff as ad
from gcgsim import gradcheck
from gcgsim import model as M
from gcgsim.autodiff import Tensor
from gcgsim.graph import Graph

from conftest import random_graph

SMALL = dict(channels=[8, 8, 6, 4], ntn_k=4, head_hidden=8, label_vocab_size=3)


def zero_params(cfg):
    return {k: Tensor(np.zeros_like(v.data)) for k, v in M.init_params(cfg).items()}


def single_pair_batch(g1, g2, vocab):
    return M.make_batch([(g1, g2)], vocab)


@pytest.fixture
def small():
    cfg = M.ModelConfig(seed=3, **SMALL)
    return cfg, M.init_params(cfg)


def some_pairs(n, seed=0, vocab=3):
    rng = random.Random(seed)
    return [(random_graph(rng, rng.randint(3, 7), vocab, 0.4, f"a{t}"),
             random_graph(rng, rng.randint(3, 7), vocab, 0.4, f"b{t}")) for t in range(n)]


# -- config ------------------------------------------------------------------


def test_default_config_values():
    cfg = M.ModelConfig()
    assert cfg.channels == [64, 64, 32, 16] and cfg.layers == 4
    assert cfg.ntn_k == 16 and cfg.beta == 0.05 and cfg.lam == 0.05


@pytest.mark.parametrize("bad", [dict(channels=[]), dict(channels=[4, 0]), dict(beta=1.5),
                                 dict(lam=-0.1), dict(alpha_map="tanh")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        M.ModelConfig(**bad)


# -- encoder -----------------------------------------------------------------


def test_encode_zero_params_keeps_projection():
    cfg = M.ModelConfig(channels=[3, 3], ntn_k=2, label_vocab_size=3)
    p = zero_params(cfg)
    p["input.W"] = Tensor(np.arange(9.0).reshape(3, 3))
    g = Graph("g", (0, 1, 2), frozenset({(0, 1), (1, 2)}))
    hs = M.encode_nodes(single_pair_batch(g, g, 3), p, cfg)
    assert np.array_equal(hs[1].data, hs[0].data)
    assert np.array_equal(hs[2].data, hs[0].data)


def test_encode_two_node_path_by_hand():
    cfg = M.ModelConfig(channels=[2], ntn_k=1, label_vocab_size=2)
    p = zero_params(cfg)
    p["input.W"] = Tensor(np.eye(2))
    p["rggc1.W_S"] = Tensor(np.array([[0.5, 0.0], [0.0, 0.5]]))
    p["rggc1.W_N"] = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    p["rggc1.W_A"] = Tensor(np.array([[0.1, 0.0], [0.0, 0.0]]))
    p["rggc1.W_B"] = Tensor(np.array([[0.0, 0.0], [0.2, 0.0]]))
    p["rggc1.b"] = Tensor(np.array([-0.3, 0.1]))
    g = Graph("p2", (0, 1), frozenset({(0, 1)}))
    h1 = M.encode_nodes(single_pair_batch(g, g, 2), p, cfg)[1].data[:2]
    # node 0: h=[1,0], neighbour h=[0,1]
    #   gate = sigmoid([0.1,0] + [0.2,0]) = [s(.3), .5]; message = [0,1]
    #   pre = [0.5,0] + [0, .5] + [-.3,.1] = [.2,.6]
    # node 1: h=[0,1], neighbour h=[1,0]
    #   gate = sigmoid([0,0] + [0,0]) = [.5,.5]; message = [1,0]
    #   pre = [0,.5] + [.5,0] + [-.3,.1] = [.2,.6]
    want = np.array([[1.2, 0.6], [0.2, 1.6]])
    np.testing.assert_allclose(h1, want, atol=1e-15)


def test_encode_isolated_node_and_unknown_label():
    cfg = M.ModelConfig(channels=[4], ntn_k=1, label_vocab_size=2)
    p = M.init_params(cfg)
    g = Graph("iso", (0, 1), frozenset())
    hs = M.encode_nodes(single_pair_batch(g, g, 2), p, cfg)
    assert np.all(np.isfinite(hs[1].data))
    with pytest.raises(ValueError, match="vocabulary"):
        M.make_batch([(Graph("x", (5,), frozenset()), g)], 2)


def test_encode_equivariance(small):
    cfg, p = small
    rng = random.Random(1)
    g = random_graph(rng, 6, 3, 0.5, "g")
    perm = [3, 0, 5, 1, 4, 2]
    gp = g.permuted(perm)
    hs = M.encode_nodes(single_pair_batch(g, g, 3), p, cfg)
    hp = M.encode_nodes(single_pair_batch(gp, gp, 3), p, cfg)
    for a, b in zip(hs, hp):
        # node k of g becomes node perm[k] of gp
        np.testing.assert_allclose(b.data[:6][perm], a.data[:6], atol=1e-12)


# -- readout / gncm / psgd ------------------------------------------------------


def test_readout_examples(small):
    cfg, p = small
    c = cfg.channels[0]
    single = Graph("s", (0,), frozenset())
    batch = single_pair_batch(single, single, 3)
    h = Tensor(np.random.default_rng(0).normal(size=(2, c)))
    out = M.readout(h, batch, p, 1).data
    np.testing.assert_allclose(out[0], M.mlp(ad.slice_rows(h, 0, 1), p, "ds1").data[0])
    two = Graph("t", (0, 0), frozenset({(0, 1)}))
    batch = single_pair_batch(two, two, 3)
    v = np.random.default_rng(1).normal(size=c)
    h = Tensor(np.stack([v, -v, v, -v]))
    out = M.readout(h, batch, p, 1).data
    np.testing.assert_allclose(out[0], M.mlp(Tensor(np.zeros((1, c))), p, "ds1").data[0], atol=1e-15)


def _two_graph_batch(n_i, n_j):
    return single_pair_batch(Graph("i", (0,) * n_i, frozenset()), Graph("j", (0,) * n_j, frozenset()), 1)


def test_gncm_all_equal_gives_unit_weights():
    batch = _two_graph_batch(2, 1)
    hg_j = np.array([1.0, 2.0, 0.5])
    h = Tensor(np.stack([hg_j, hg_j, [0.3, 0.1, 0.2]]))
    hg = Tensor(np.stack([[0.3, 0.1, 0.2], hg_j]))
    omega, ht = M.gncm(h, hg, batch)
    np.testing.assert_allclose(omega.data[:2, 0], [1.0, 1.0])
    np.testing.assert_allclose(ht.data[0], 2 * hg_j)


def test_gncm_orthogonal_node_contributes_nothing():
    batch = _two_graph_batch(2, 1)
    h = Tensor(np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 1.0]]))
    hg = Tensor(np.array([[1.0, 1.0], [1.0, 0.0]]))
    omega, ht = M.gncm(h, hg, batch)
    assert omega.data[0, 0] == 0.0
    np.testing.assert_allclose(ht.data[0], [2.0, 0.0])


def test_gncm_two_nodes_by_hand():
    batch = _two_graph_batch(2, 1)
    h = Tensor(np.array([[1.0, 1.0], [3.0, 4.0], [0.0, 1.0]]))
    hg = Tensor(np.array([[0.0, 2.0], [1.0, 0.0]]))
    omega, ht = M.gncm(h, hg, batch)
    w0, w1 = 1 / np.sqrt(2), 3 / 5
    np.testing.assert_allclose(omega.data[:2, 0], [w0, w1], atol=1e-15)
    np.testing.assert_allclose(ht.data[0], [w0 + 3 * w1, w0 + 4 * w1], atol=1e-15)
    # side j is weighted against graph i's embedding [0, 2]
    np.testing.assert_allclose(omega.data[2, 0], 1.0)
    np.testing.assert_allclose(ht.data[1], [0.0, 1.0])


@pytest.mark.parametrize("hj,clamp,affine", [
    ([1.0, 2.0], 1.0, 1.0),
    ([-2.0, 1.0], 0.0, 0.5),
    ([-1.0, -2.0], 0.0, 0.0),
])
def test_psgd_alpha_examples(hj, clamp, affine):
    hg = Tensor(np.array([[1.0, 2.0], hj]))
    got = M.psgd_alpha(hg, M.ModelConfig(), 1).data[0, 0]
    assert got == pytest.approx(clamp, abs=1e-15)
    got = M.psgd_alpha(hg, M.ModelConfig(alpha_map="affine"), 1).data[0, 0]
    assert got == pytest.approx(affine, abs=1e-15)


def test_psgd_disentangle_scaling(small):
    cfg, p = small
    c = cfg.channels[0]
    ht = Tensor(np.random.default_rng(2).normal(size=(2, c)))
    raw_as, raw_us = M.psgd_disentangle(ht, None, p, 1)
    h_as, h_us = M.psgd_disentangle(ht, Tensor(np.array([[1.0], [0.0]])), p, 1)
    assert np.all(h_us.data[0] == 0.0) and np.all(h_as.data[1] == 0.0)
    assert np.array_equal(h_as.data[0], raw_as.data[0])
    h_as, h_us = M.psgd_disentangle(ht, Tensor(np.full((2, 1), 0.5)), p, 1)
    np.testing.assert_allclose(h_as.data, 0.5 * raw_as.data, rtol=0, atol=0)
    np.testing.assert_allclose(h_us.data, 0.5 * raw_us.data, rtol=0, atol=0)


# -- iir / ntn / fuse ---------------------------------------------------------------


def test_iir_replicate_cases():
    hi, hj = Tensor(np.ones((3, 2))), Tensor(np.full((3, 2), 7.0))
    assert M.iir_replicate(hi, hj, None) is hi
    out = M.iir_replicate(hi, hj, np.array([True, False, True])).data
    assert out.tolist() == [[7, 7], [1, 1], [7, 7]]


def test_iir_beta_zero_never_fires():
    rng = np.random.default_rng(0)
    assert not any(M.iir_draw(rng, 64, 0.0).any() for _ in range(200))
    # the literal reading keeps with probability beta, so beta=0 always replaces
    assert M.iir_draw(rng, 64, 0.0, flip=True).all()


def test_iir_in_forward(small):
    cfg, p = small
    pairs = some_pairs(8, seed=4)
    batch = M.make_batch(pairs, 3)
    acts = M.forward(batch, p, cfg, np.random.default_rng(0), training=False)
    for lay in acts.layers:
        assert lay.h_as_i_hat is lay.h_as_i
    cfg1 = M.ModelConfig(seed=3, beta=1.0, **SMALL)
    acts = M.forward(batch, p, cfg1, np.random.default_rng(0), training=True)
    assert acts.iir_fired.all()
    for lay in acts.layers:
        assert np.array_equal(lay.h_as_i_hat.data, lay.h_as_j.data)
    # one draw per pair, shared across layers
    cfg_half = M.ModelConfig(seed=3, beta=0.5, **SMALL)
    acts = M.forward(batch, p, cfg_half, np.random.default_rng(5), training=True)
    fired = acts.iir_fired
    assert 0 < fired.sum() < len(fired)
    for lay in acts.layers:
        np.testing.assert_array_equal(lay.h_as_i_hat.data[fired], lay.h_as_j.data[fired])
        np.testing.assert_array_equal(lay.h_as_i_hat.data[~fired], lay.h_as_i.data[~fired])


def test_ntn_examples():
    c, K = 2, 1
    p = {"t.W": Tensor(np.eye(c).reshape(K, c, c)), "t.V": Tensor(np.zeros((2 * c, K))), "t.b": Tensor(np.zeros(K))}
    h = Tensor(np.ones((1, c)))
    assert M.ntn(h, h, p, "t").data.tolist() == [[2.0]]
    pz = {k: Tensor(np.zeros_like(v.data)) for k, v in p.items()}
    assert M.ntn(h, h, pz, "t").data.tolist() == [[0.0]]
    K = 5
    rng = np.random.default_rng(0)
    p = {"t.W": Tensor(rng.normal(size=(K, 3, 3))), "t.V": Tensor(rng.normal(size=(6, K))),
         "t.b": Tensor(rng.normal(size=K))}
    assert M.ntn(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3))), p, "t").shape == (4, K)


def test_fuse_examples():
    parts = [Tensor(np.full((1, 16), float(l))) for l in range(4)]
    out = M.fuse(parts).data
    assert out.shape == (1, 64)
    assert [out[0, 16 * l] for l in range(4)] == [0.0, 1.0, 2.0, 3.0]
    one = Tensor(np.arange(5.0).reshape(1, 5))
    assert np.array_equal(M.fuse([one]).data, one.data)


# -- full forward -------------------------------------------------------------------


def test_forward_identical_graphs_symmetry(small):
    cfg, p = small
    g = random_graph(random.Random(9), 6, 3, 0.5, "g")
    acts = M.run_pairs([(g, g)], p, cfg)
    for l, lay in enumerate(acts.layers, start=1):
        assert lay.alpha.data[0, 0] == 1.0
        assert np.all(lay.h_us_i.data == 0.0) and np.all(lay.h_us_j.data == 0.0)
        bias_only = np.maximum(p[f"ntn_us{l}.b"].data, 0.0)
        np.testing.assert_array_equal(lay.i_us.data[0], bias_only)


def test_forward_ranges_and_shapes(small):
    cfg, p = small
    acts = M.run_pairs(some_pairs(16), p, cfg)
    s = acts.similarity()
    assert np.all((s > 0) & (s < 1))
    LK = cfg.layers * cfg.ntn_k
    assert acts.i_as.shape == (16, LK) and acts.i_us.shape == (16, LK)
    assert np.all(acts.i_as.data >= 0) and np.all(acts.i_us.data >= 0)
    for lay in acts.layers:
        assert np.all(np.abs(lay.omega.data) <= 1 + 1e-12)
        assert np.all((lay.alpha.data >= 0) & (lay.alpha.data <= 1))


def test_forward_permutation_invariance(small):
    cfg, p = small
    pairs = some_pairs(6, seed=11)
    rng = random.Random(2)
    permuted = []
    for g1, g2 in pairs:
        permuted.append(tuple(g.permuted(rng.sample(range(g.n), g.n)) for g in (g1, g2)))
    a, b = M.run_pairs(pairs, p, cfg), M.run_pairs(permuted, p, cfg)
    for name in ("s_hat", "ec_as", "ec_us"):
        np.testing.assert_allclose(getattr(a, name).data, getattr(b, name).data, rtol=0, atol=1e-12)


def test_forward_deterministic_without_training(small):
    cfg, p = small
    pairs = some_pairs(5)
    a, b = M.predict(pairs, p, cfg), M.predict(pairs, p, cfg)
    assert a.tobytes() == b.tobytes()


def test_batched_equals_single(small):
    cfg, p = small
    pairs = some_pairs(7, seed=5)
    batched = M.predict(pairs, p, cfg)
    single = np.array([M.predict([pr], p, cfg)[0] for pr in pairs])
    np.testing.assert_allclose(batched, single, rtol=0, atol=1e-13)


def test_ablation_switches(small):
    cfg, p = small
    pairs = some_pairs(3)
    no_gncm = M.run_pairs(pairs, p, M.ModelConfig(seed=3, use_gncm=False, **SMALL))
    for lay in no_gncm.layers:
        assert lay.omega is None and lay.h_tilde is lay.h_g
    no_psgd = M.run_pairs(pairs, p, M.ModelConfig(seed=3, use_psgd=False, **SMALL))
    assert all(lay.alpha is None for lay in no_psgd.layers)


# -- loss ---------------------------------------------------------------------------


def fake_acts(s_hat, ec_as, ec_us):
    col = lambda v: Tensor(np.array(v, float).reshape(-1, 1))  # noqa: E731
    return SimpleNamespace(n_pairs=len(s_hat), s_hat=col(s_hat), ec_as=col(ec_as), ec_us=col(ec_us))


def test_loss_examples():
    assert M.loss(fake_acts([0.7], [0.0], [3.0]), [3], [0.7], 0.05).item() == 0.0
    assert M.loss(fake_acts([0.5], [1.0], [0.0]), [2], [1.0], 0.0).item() == 0.25
    assert M.loss(fake_acts([0.5], [1.0], [0.0]), [2], [1.0], 0.05).item() == pytest.approx(0.5, abs=1e-15)
    # batch loss is the mean of per-pair losses
    both = M.loss(fake_acts([0.5, 0.7], [1.0, 0.0], [0.0, 3.0]), [2, 3], [1.0, 0.7], 0.05).item()
    assert both == pytest.approx(0.25, abs=1e-15)


# -- swaps ---------------------------------------------------------------------------


def test_swap_examples(small):
    cfg, p = small
    g = random_graph(random.Random(3), 5, 3, 0.5, "g")
    acts = M.run_pairs([(g, g)], p, cfg)
    s_iis, none = M.swap_inference(acts, None, "IIS", p)
    assert none is None
    np.testing.assert_array_equal(s_iis, acts.similarity())
    pairs = some_pairs(4, seed=8)
    a, b = M.run_pairs(pairs, p, cfg), M.run_pairs(pairs, p, cfg)
    for mode in ("eisa", "eisu"):
        sa, sb = M.swap_inference(a, b, mode, p)
        np.testing.assert_array_equal(sa, a.similarity())
        np.testing.assert_array_equal(sb, b.similarity())
    with pytest.raises(ValueError):
        M.swap_inference(a, None, "eisa", p)
    with pytest.raises(ValueError):
        M.swap_inference(a, b, "bogus", p)


def test_swap_changes_prediction_between_distinct_pairs(small):
    cfg, p = small
    a = M.run_pairs(some_pairs(4, seed=1), p, cfg)
    b = M.run_pairs(some_pairs(4, seed=2), p, cfg)
    sa, _ = M.swap_inference(a, b, "eisa", p)
    assert not np.allclose(sa, a.similarity())


# -- persistence / gradients -------------------------------------------------------


def test_save_load_round_trip(tmp_path, small):
    cfg, p = small
    path = tmp_path / "m.json"
    M.save_model(path, cfg, p)
    cfg2, p2 = M.load_model(path)
    assert cfg2 == cfg
    pairs = some_pairs(4)
    assert M.predict(pairs, p, cfg).tobytes() == M.predict(pairs, p2, cfg2).tobytes()


def test_gncm_rows(small):
    cfg, p = small
    pairs = some_pairs(2)
    rows = M.gncm_rows(M.run_pairs(pairs, p, cfg), pair_index=1)
    g1, g2 = pairs[1]
    assert len(rows) == cfg.layers * (g1.n + g2.n)
    assert rows[0][:3] == (1, "i", 0)


def test_param_groups_cover_all(small):
    _, p = small
    assert {M.param_group(k) for k in p} == {"rggc", "deepsets", "encoders", "ntn", "heads"}


def test_model_gradcheck_smoke():
    results = gradcheck.run_model_suite(instances=2, seed=1)
    assert all(r.ok for r in results), max(results, key=lambda r: r.rel_error)
