import math

import numpy as np
import pytest

from aptkit import align
from aptkit.align import (
    AlignConfigError, ContrastiveConfig, SamplingError, SiameseConfig, SiameseNet, build_pairs,
    cosine_similarity, domain_pairs, info_nce_loss, kmeans_pseudolabels, mine_hard_negatives,
    siamese_contrastive_loss, similarity_summary, train_contrastive_head, train_siamese,
    transform_embeddings,
)
from conftest import fd_max_rel_error


def blobs(seed, k=2, n_per=40, dim=8, spread=0.3, sep=5.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, dim)) * sep
    Z = np.vstack([c + spread * rng.normal(size=(n_per, dim)) for c in centers])
    return Z, np.repeat(np.arange(k), n_per)


def same_partition(a, b):
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(len(a)) for j in range(i + 1, len(a)))


def test_cosine_properties(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-15)
    assert -1 <= cosine_similarity(a, b) <= 1
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(np.zeros(5), a) == 0.0


def test_kmeans_recovers_blobs():
    for seed in range(10):
        Z, truth = blobs(seed, n_per=25)
        pl = kmeans_pseudolabels(Z, 2, seed)
        assert same_partition(pl.assignments, truth)


def test_kmeans_k_equals_n(rng):
    Z = rng.normal(size=(6, 3))
    assert kmeans_pseudolabels(Z, 6, 0).inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_duplicates_share_cluster(rng):
    Z = rng.normal(size=(30, 4))
    Z = np.vstack([Z, Z[:5]])
    a = kmeans_pseudolabels(Z, 4, 1).assignments
    assert np.array_equal(a[:5], a[30:])


def test_kmeans_nearest_centroid_invariant(rng):
    Z = rng.normal(size=(60, 3))
    pl = kmeans_pseudolabels(Z, 4, 2)
    d2 = ((Z[:, None, :] - pl.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(pl.assignments, d2.argmin(1))


def test_kmeans_needs_enough_rows():
    with pytest.raises(AlignConfigError):
        kmeans_pseudolabels(np.zeros((2, 2)), 3)


def test_pairs_small_case():
    ps = build_pairs([0, 0, 1, 1], 2, 2, seed=0)
    assert len(ps) == 4
    lab = np.array([0, 0, 1, 1])
    for a, b, y in zip(ps.a, ps.b, ps.y):
        assert a != b
        assert y == int(lab[a] != lab[b])


def test_pairs_single_class():
    with pytest.raises(SamplingError):
        build_pairs([1, 1, 1], 1, 1)


def test_pairs_counts_exact(rng):
    lab = rng.integers(0, 4, size=50)
    ps = build_pairs(lab, 37, 23, seed=5)
    assert int((ps.y == 0).sum()) == 37 and int((ps.y == 1).sum()) == 23
    assert np.all(ps.y == (lab[ps.a] != lab[ps.b]))


def test_cross_pairs():
    ps = build_pairs([0, 1, 2], 5, 5, seed=1, labels_b=[0, 1], domains=("source", "target"))
    assert ps.domain_a == "source" and ps.domain_b == "target"
    assert np.all(ps.b < 2)


def test_info_nce_closed_form():
    a = np.array([1.0, 0.0, 0.0])
    negs = [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    expected = -math.log(math.exp(10) / (math.exp(10) + 2))
    assert info_nce_loss(a, a, negs, 0.1) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(9.08e-5, rel=1e-3)


@pytest.mark.parametrize("tau", [0.05, 0.1, 1.0, 7.0])
def test_info_nce_symmetric_case(tau, rng):
    a, p = rng.normal(size=4), rng.normal(size=4)
    assert info_nce_loss(a, p, [p, p, p], tau) == pytest.approx(math.log(4), rel=1e-12)


def test_info_nce_monotone():
    a = np.array([1.0, 0.0])
    negs = [np.array([0.0, 1.0]), np.array([-1.0, 0.2])]
    losses = [info_nce_loss(a, np.array([math.cos(t), math.sin(t)]), negs) for t in np.linspace(2.5, 0, 12)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_hard_negative_mining(rng):
    a = np.array([1.0, 0.0, 0.0])
    assert mine_hard_negatives(a, [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 2.0])]) == []
    assert len(mine_hard_negatives(a, [a.copy()])) == 1
    C = rng.normal(size=(200, 3))
    anchor = rng.normal(size=3)
    brute = sum(1 for c in C if anchor @ c / (np.linalg.norm(anchor) * np.linalg.norm(c)) > 0.5)
    assert len(mine_hard_negatives(anchor, list(C), 0.5)) == brute


def test_info_nce_gradient(rng):
    head = align._contrastive_head(6, rng)
    Za, Zp = rng.normal(size=(12, 6)), rng.normal(size=(12, 6))
    cls = np.array([0, 1, 2] * 4)
    cfg = ContrastiveConfig(delta=0.3)
    loss, grads = align.contrastive_step_loss(head, Za, Zp, cls, cfg)

    def f():
        out = head(np.vstack([Za, Zp]))
        return align.batch_info_nce(out[:12], out[12:], cls, cfg.tau, cfg.delta, cfg.hard_negative_weight)[0]

    err, n = fd_max_rel_error(f, head.params(), grads, n_checks=60, seed=4)
    assert err < 1e-4
    assert align.info_nce_gradient_check(head, Za, Zp, cls, cfg) < 1e-4


def test_contrastive_head_separates_blobs():
    for seed in range(5):
        Z, truth = blobs(seed, n_per=60, spread=1.0, sep=3.0)
        head, R, trace = train_contrastive_head(Z, truth, ContrastiveConfig(epochs=30, lr=1e-3, seed=seed,
                                                                            batch_size=64))
        np.testing.assert_allclose(np.linalg.norm(R, axis=1), 1.0, atol=1e-9)
        assert trace[-1] <= trace[0]
        C = R @ R.T
        same = truth[:, None] == truth[None, :]
        off = ~np.eye(len(truth), dtype=bool)
        assert C[same & off].mean() - C[~same].mean() >= 0.2


def test_contrastive_needs_two_clusters(rng):
    with pytest.raises(AlignConfigError):
        train_contrastive_head(rng.normal(size=(10, 3)), np.zeros(10, dtype=int))


def test_siamese_loss_values():
    assert siamese_contrastive_loss(0.0, 0) == 0.0
    assert siamese_contrastive_loss(1.5, 1, 1.0) == 0.0
    assert siamese_contrastive_loss(0.5, 1, 1.0) == 0.125


def test_siamese_architecture(rng):
    net = SiameseNet.create(8, seed=0)
    widths = [L.W.shape[1] for L in net.net.layers]
    assert widths == [128, 128, 64, 32, 16]
    assert [L.bn is not None for L in net.net.layers] == [False, True, True, False, False]
    assert transform_embeddings(net, rng.normal(size=(5, 8))).shape == (5, 16)


def test_untrained_identical_inputs_have_zero_loss(rng):
    net = SiameseNet.create(6, seed=1)
    Z = rng.normal(size=(7, 6))
    loss, _, _ = align.siamese_step_loss(net, Z, Z, np.zeros(7), train=False)
    assert loss == 0.0


def test_siamese_symmetry_and_composition(rng):
    net = SiameseNet.create(6, seed=2)
    A, B = rng.normal(size=(9, 6)), rng.normal(size=(9, 6))
    np.testing.assert_array_equal(net.distance(A, B), net.distance(B, A))
    direct = np.linalg.norm(net.transform(A) - net.transform(B), axis=1)
    np.testing.assert_allclose(net.distance(A, B), direct, atol=1e-10, rtol=0)
    x = rng.normal(size=(1, 6))
    assert np.array_equal(net.transform(np.vstack([x, x]))[0], net.transform(np.vstack([x, x]))[1])


def test_siamese_gradient(rng):
    net = SiameseNet.create(5, seed=3)
    A, B = rng.normal(size=(10, 5)), rng.normal(size=(10, 5))
    y = np.array([0, 1] * 5)
    loss, grads, _ = align.siamese_step_loss(net, A, B, y)
    err, _ = fd_max_rel_error(lambda: align.siamese_step_loss(net, A, B, y)[0], net.net.params(), grads,
                              n_checks=60, seed=2)
    assert err < 1e-4
    assert align.siamese_gradient_check(net, A, B, y) < 1e-4


def _aligned_setup(seed):
    Zs, ls = blobs(seed, k=3, n_per=40, dim=6)
    rng = np.random.default_rng(seed + 100)
    Zt = Zs + 0.5 + 0.2 * rng.normal(size=Zs.shape)  # shifted copy of the same classes
    return Zs, Zt, ls, ls.copy()


def test_siamese_orders_distances():
    for seed in range(5):
        Zs, Zt, ls, lt = _aligned_setup(seed)
        net, trace = train_siamese(Zs, Zt, ls, lt, cfg=SiameseConfig(epochs=10, seed=seed))
        pairs = domain_pairs(ls, lt, 200, seed)
        rep = similarity_summary(net, Zs, Zt, pairs)
        for setting in ("source", "target", "cross"):
            pos, neg = rep[f"{setting}/positive"], rep[f"{setting}/negative"]
            assert pos["mean_distance"] < neg["mean_distance"]
            assert pos["mean"] >= neg["mean"]


def test_similarity_report_schema(rng):
    Zs, Zt, ls, lt = _aligned_setup(0)
    net = SiameseNet.create(6)
    rep = similarity_summary(net, Zs, Zt, domain_pairs(ls, lt, 50, 0))
    assert set(rep) == {f"{s}/{p}" for s in ("source", "target", "cross") for p in ("positive", "negative")}
    for v in rep.values():
        assert len(v["bins"]) == 20 and sum(v["bins"]) == v["count"]


def test_identical_pair_in_top_bin(rng):
    Z = rng.normal(size=(4, 6))
    pairs = {"cross": align.PairSet(np.array([1]), np.array([1]), np.array([0]), "source", "target")}
    rep = similarity_summary(SiameseNet.create(6), Z, Z, pairs)
    assert rep["cross/positive"]["bins"][-1] == 1
    assert rep["cross/positive"]["mean"] == pytest.approx(1.0, abs=1e-12)


def test_siamese_json_round_trip(rng):
    Zs, Zt, ls, lt = _aligned_setup(1)
    net, _ = train_siamese(Zs, Zt, ls, lt, cfg=SiameseConfig(epochs=2))
    back = align.siamese_from_json(align.siamese_to_json(net))
    assert np.array_equal(back.transform(Zt), net.transform(Zt))


def test_embeddings_csv(tmp_path, rng):
    align.write_embeddings(tmp_path / "e.csv", [(["a", "b"], "source", "raw", rng.normal(size=(2, 3))),
                                                 (["c"], "target", "aligned", rng.normal(size=(1, 2)))])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "row_id,domain,stage,v1,v2,v3"
    assert lines[3].startswith("c,target,aligned,") and lines[3].endswith(",")
