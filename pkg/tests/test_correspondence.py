import numpy as np
import pytest

from ktl.correspondence import (ImageFeatures, PseudoLabelSet, cluster_symmetry_map, dedupe_per_image,
                                final_k_clustering, flip_labels, kmeans, read_labels, recover_correspondence,
                                write_labels)

from oracles import exhaustive_two_partition, group_min


def unit(x):
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def motif_corpus(n_images, K, d=16, noise=0.02, seed=0, dup=1):
    """Each image shows K motifs; motif k has descriptor ~ e_k."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n_images):
        idx = np.repeat(np.arange(K), dup)
        desc = unit(np.eye(d)[idx] + rng.normal(0, noise, (len(idx), d)))
        pos = rng.uniform(0, 31, (len(idx), 2))
        out.append(ImageFeatures(j, pos, desc))
    return out


def test_kmeans_single_cluster():
    x = np.random.default_rng(0).normal(size=(30, 3))
    cs, lab = kmeans(x, 1, seed=0)
    np.testing.assert_allclose(cs.centroids[0], x.mean(axis=0), atol=1e-12)
    assert np.isclose(cs.inertia, x.var(axis=0).sum() * len(x))
    assert np.all(lab == 0)


def test_kmeans_distinct_points_zero_inertia():
    x = np.random.default_rng(1).normal(size=(6, 4))
    cs, lab = kmeans(np.repeat(x, 3, axis=0), 6, seed=2)
    assert cs.inertia == 0.0
    assert len(set(lab.tolist())) == 6


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_two_blobs_match_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    centers = unit(rng.normal(size=(2, 5)))
    member = rng.integers(0, 2, n)
    member[:2] = [0, 1]
    x = unit(centers[member] + rng.normal(0, 0.05, (n, 5)))
    cs, lab = kmeans(x, 2, seed=seed)
    assert np.isclose(cs.inertia, exhaustive_two_partition(x), rtol=1e-9, atol=1e-12)
    same = lab[:, None] == lab[None, :]
    assert np.array_equal(same, member[:, None] == member[None, :])


def test_kmeans_history_monotone():
    x = unit(np.random.default_rng(3).normal(size=(300, 8)))
    for seed in range(5):
        cs, _ = kmeans(x, 12, seed=seed)
        h = cs.inertia_history
        assert all(b <= a for a, b in zip(h, h[1:]))
        assert not np.any(np.isnan(cs.centroids))


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 5)


def test_dedupe_cases():
    c = np.array([[0.0, 0.0], [10.0, 0.0]])
    feats = np.array([[0.1, 0], [0.3, 0], [10, 0]])
    keep = dedupe_per_image(np.zeros(3, dtype=int), np.array([0, 0, 1]), feats, c)
    assert keep.tolist() == [True, False, True]
    keep = dedupe_per_image(np.zeros(2, dtype=int), np.array([0, 1]), feats[[0, 2]], c)
    assert keep.all()


def test_dedupe_matches_group_by():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 5, 200)
    lab = rng.integers(0, 7, 200)
    feats = rng.normal(size=(200, 3))
    c = rng.normal(size=(7, 3))
    d = ((feats - c[lab]) ** 2).sum(1)
    assert np.array_equal(dedupe_per_image(img, lab, feats, c), group_min(img, lab, d))


def test_separable_motifs_all_survive():
    imgs = motif_corpus(20, 6)
    out = recover_correspondence(imgs, 6, 6, seed=0)
    assert all(len(v["labels"]) == 6 for v in out.per_image.values())


def test_near_duplicates_collapse():
    imgs = motif_corpus(20, 5, dup=2, noise=0.01)
    out = recover_correspondence(imgs, 5, 5, seed=1)
    assert all(len(v["labels"]) == 5 for v in out.per_image.values())


def test_single_cluster_keeps_nearest_to_global_mean():
    rng = np.random.default_rng(5)
    imgs = [ImageFeatures(j, rng.uniform(0, 31, (4, 2)), unit(rng.normal(size=(4, 3)))) for j in range(6)]
    out = recover_correspondence(imgs, 1, 1, seed=0)
    mean = np.concatenate([im.descriptors for im in imgs]).mean(axis=0)
    for im in imgs:
        rec = out.per_image[im.sample_id]
        assert len(rec["labels"]) == 1
        best = np.argmin(((im.descriptors - mean) ** 2).sum(1))
        assert rec["keypoint_index"][0] == best


@pytest.mark.parametrize("seed", range(5))
def test_constraints_on_random_corpora(seed):
    rng = np.random.default_rng(seed)
    imgs = [ImageFeatures(j, rng.uniform(0, 31, (n, 2)), unit(rng.normal(size=(n, 8))))
            for j, n in enumerate(rng.integers(0, 25, 30))]
    out = recover_correspondence(imgs, 10, 25, seed=seed)
    for v in out.per_image.values():
        assert len(v["labels"]) <= 10
        assert len(set(v["labels"].tolist())) == len(v["labels"])


def _mirror_corpus(n_images=30, seed=0, noise=0.02):
    # 6 motifs as 3 mirror pairs: flipping turns motif i into motif sym[i]
    sym = np.array([1, 0, 3, 2, 5, 4])
    rng = np.random.default_rng(seed)
    orig, flip = [], []
    for j in range(n_images):
        pos = rng.uniform(0, 31, (6, 2))
        orig.append(ImageFeatures(j, pos, unit(np.eye(8)[:6] + rng.normal(0, noise, (6, 8)))))
        flip.append(ImageFeatures(j, pos, unit(np.eye(8)[sym] + rng.normal(0, noise, (6, 8)))))
    return orig, flip, sym


def test_flip_labels_pair_consistency():
    orig, flip, _ = _mirror_corpus()
    a, b = flip_labels(orig, flip, 6, 6, seed=0)
    pairs = []
    for sid in a.per_image:
        la = dict(zip(a.per_image[sid]["keypoint_index"].tolist(), a.per_image[sid]["labels"].tolist()))
        lb = dict(zip(b.per_image[sid]["keypoint_index"].tolist(), b.per_image[sid]["labels"].tolist()))
        pairs += [(la[k], lb[k]) for k in la if k in lb]
    _, counts = np.unique(np.array(pairs), axis=0, return_counts=True)
    # each of the 6 motifs should always produce the same (original, flipped) label pair
    assert np.sort(counts)[::-1][:6].sum() / len(pairs) >= 0.9


def test_self_symmetric_image_gets_equal_multisets():
    orig, _, _ = _mirror_corpus(10)
    a, b = flip_labels(orig, orig, 6, 6, seed=0)
    for sid in a.per_image:
        assert sorted(a.per_image[sid]["labels"].tolist()) == sorted(b.per_image[sid]["labels"].tolist())


def test_disjoint_sides_cluster_independently():
    rng = np.random.default_rng(6)
    orig, flip = [], []
    for j in range(25):
        pos = rng.uniform(0, 31, (3, 2))
        orig.append(ImageFeatures(j, pos, unit(np.eye(8)[:3] + rng.normal(0, 0.02, (3, 8)))))
        flip.append(ImageFeatures(j, pos, unit(np.eye(8)[3:6] + rng.normal(0, 0.02, (3, 8)))))
    a, b = flip_labels(orig, flip, 3, 6, seed=0)
    xa = np.concatenate([o.descriptors for o in orig])
    xb = np.concatenate([f.descriptors for f in flip])
    ia, _ = kmeans(xa, 3, seed=0)
    ib, _ = kmeans(xb, 3, seed=0)
    assert np.isclose(a.centroids.inertia, ia.inertia + ib.inertia, rtol=1e-9)
    la = set(np.concatenate([v["labels"] for v in a.per_image.values()]).tolist())
    lb = set(np.concatenate([v["labels"] for v in b.per_image.values()]).tolist())
    assert not la & lb


def _labelset(labels_per_image, M):
    ls = PseudoLabelSet(0, M)
    for sid, lab in enumerate(labels_per_image):
        lab = np.asarray(lab)
        ls.per_image[sid] = {"positions": np.zeros((len(lab), 2)), "labels": lab,
                             "descriptors": None, "keypoint_index": np.arange(len(lab))}
    return ls


def test_symmetry_map_recovers_permutation():
    rng = np.random.default_rng(7)
    pi = rng.permutation(8)
    orig = [rng.permutation(8)[:5] for _ in range(20)]
    a = _labelset(orig, 8)
    b = _labelset([pi[o] for o in orig], 8)
    perm, counts = cluster_symmetry_map(a, b)
    assert np.array_equal(perm, pi)
    assert counts.sum() == 100


def test_symmetry_map_identity_when_diagonal():
    orig = [np.arange(4)] * 10
    perm, _ = cluster_symmetry_map(_labelset(orig, 4), _labelset(orig, 4))
    assert np.array_equal(perm, np.arange(4))


def test_symmetry_map_involution_on_mirror_corpus():
    orig, flip, _ = _mirror_corpus(40, seed=3)
    a, b = flip_labels(orig, flip, 6, 6, seed=0)
    perm, counts = cluster_symmetry_map(a, b)
    conf = counts >= 0.5 * counts.max()
    assert conf.sum() >= 6
    assert np.all(perm[perm[conf]] == np.flatnonzero(conf))


def test_final_k_clustering():
    imgs = motif_corpus(15, 4, seed=8)
    labels, cs = final_k_clustering(imgs, 4, seed=0)
    # blob-pure: motif k of every image gets the same label
    per_motif = {}
    for im in imgs:
        rec = labels.per_image[im.sample_id]
        for k, lab in zip(rec["keypoint_index"], rec["labels"]):
            per_motif.setdefault(int(k), set()).add(int(lab))
    assert all(len(v) == 1 for v in per_motif.values())
    assert len({next(iter(v)) for v in per_motif.values()}) == 4
    one, _ = final_k_clustering(imgs, 1, seed=0)
    assert all(np.all(v["labels"] == 0) for v in one.per_image.values())
    again, _ = final_k_clustering(imgs, 4, seed=0)
    for sid in labels.per_image:
        assert np.array_equal(labels.per_image[sid]["labels"], again.per_image[sid]["labels"])


def test_labels_round_trip(tmp_path):
    out = recover_correspondence(motif_corpus(5, 3), 3, 3, seed=0, round_t=2)
    write_labels(tmp_path / "l.jsonl", out)
    back = read_labels(tmp_path / "l.jsonl")
    assert back.round == 2 and back.M == 3
    for sid, rec in out.per_image.items():
        np.testing.assert_array_equal(back.per_image[sid]["positions"], rec["positions"])
        np.testing.assert_array_equal(back.per_image[sid]["labels"], rec["labels"])
