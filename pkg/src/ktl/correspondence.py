"""Correspondence recovery by per-image constrained K-means.

Keypoint descriptors from the whole corpus are clustered; within an image at
most one keypoint may carry a given cluster, the survivor being the one
closest to the centroid.  Recovery runs two passes: ``K`` clusters to keep
at most K keypoints per image, then ``M >= K`` clusters on the survivors for
the final (over-segmented) labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matching import hungarian

__all__ = [
    "CentroidSet",
    "ImageFeatures",
    "PseudoLabelSet",
    "kmeans",
    "assign_nearest",
    "dedupe_per_image",
    "recover_correspondence",
    "flip_labels",
    "cluster_symmetry_map",
    "final_k_clustering",
    "label_with_centroids",
    "write_labels",
    "read_labels",
]


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (M, d)
    iteration_count: int
    inertia: float
    inertia_history: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.centroids)


@dataclass
class ImageFeatures:
    """Keypoints of one image: positions (grid coords) and unit descriptors."""

    sample_id: int
    positions: np.ndarray  # (n, 2)
    descriptors: np.ndarray  # (n, d)

    def __len__(self):
        return len(self.positions)


@dataclass
class PseudoLabelSet:
    round: int
    M: int
    per_image: dict = field(default_factory=dict)
    centroids: CentroidSet | None = None
    # per_image[sample_id] = {"positions": (n,2), "labels": (n,), "descriptors": (n,d)|None,
    #                         "keypoint_index": (n,) index into the image's input keypoints}

    def points_per_image(self) -> float:
        if not self.per_image:
            return 0.0
        return float(np.mean([len(v["labels"]) for v in self.per_image.values()]))

    def labels(self, sid) -> np.ndarray:
        return self.per_image[sid]["labels"]

    def positions(self, sid) -> np.ndarray:
        return self.per_image[sid]["positions"]

    def cluster_sizes(self) -> np.ndarray:
        allv = [v["labels"] for v in self.per_image.values()]
        cat = np.concatenate(allv) if allv else np.zeros(0, dtype=int)
        return np.bincount(cat.astype(int), minlength=self.M)


# ---------------------------------------------------------------- k-means

def _sqdist(x, c):
    return ((x - c) ** 2).sum(axis=1)


def _exact_le(new: np.ndarray, old: np.ndarray) -> bool:
    """``sum(new) <= sum(old)`` decided on the exact (not rounded) sums."""
    return math.fsum(np.concatenate([new, -old]).tolist()) <= 0.0


def _kmeanspp(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sqdist(x, x[idx[0]])
    for _ in range(1, m):
        tot = d2.sum()
        if tot <= 0:
            # all remaining mass at existing centres: take unused points in order
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sqdist(x, x[nxt]))
    return x[idx].astype(float).copy()


def assign_nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (lowest index on ties)."""
    x = np.asarray(x, dtype=float)
    d = (x**2).sum(1)[:, None] - 2 * x @ centroids.T + (centroids**2).sum(1)[None]
    return np.argmin(d, axis=1)


def kmeans(features, M: int, seed: int = 0, max_iters: int = 100,
           n_init: int = 3) -> tuple[CentroidSet, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Empty clusters are re-seeded at the features farthest from their current
    centroids.  Every accepted step is checked on exact sums, so the recorded
    inertia never increases, even by a rounding error.
    """
    x = np.asarray(features, dtype=float)
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(x) < M:
        raise ValueError(f"kmeans needs at least M={M} features, got {len(x)}")
    best = None
    for r in range(max(1, n_init)):
        run = _lloyd(x, M, np.random.default_rng([seed, r]), max_iters)
        if best is None or run[0].inertia < best[0].inertia:
            best = run
    return best


def _lloyd(x: np.ndarray, M: int, rng: np.random.Generator, max_iters: int):
    c = _kmeanspp(x, M, rng)
    labels = assign_nearest(x, c)
    cost = _sqdist(x, c[labels])
    history = [math.fsum(cost.tolist())]
    it = 0
    for it in range(1, max_iters + 1):
        # update step (means + empty-cluster reseeding), guarded on exact sums
        counts = np.bincount(labels, minlength=M)
        new_c = c.copy()
        nz = counts > 0
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        new_c[nz] = sums[nz] / counts[nz, None]
        new_labels = labels.copy()
        empty = np.flatnonzero(~nz)
        if len(empty):
            far = np.argsort(-_sqdist(x, new_c[labels]), kind="stable")
            for k, i in zip(empty, far):
                new_c[k] = x[i]
                new_labels[i] = k
        new_cost = _sqdist(x, new_c[new_labels])
        if not _exact_le(new_cost, cost):
            break
        c, labels, cost = new_c, new_labels, new_cost
        # assignment step: move a point only if strictly closer
        cand = assign_nearest(x, c)
        cand_cost = _sqdist(x, c[cand])
        move = cand_cost < cost
        if not move.any():
            history.append(math.fsum(cost.tolist()))
            break
        labels = np.where(move, cand, labels)
        cost = np.where(move, cand_cost, cost)
        history.append(math.fsum(cost.tolist()))
    return CentroidSet(c, it, history[-1], history), labels


# ------------------------------------------------------------- per image

def dedupe_per_image(image_index: np.ndarray, labels: np.ndarray, features: np.ndarray,
                     centroids: np.ndarray) -> np.ndarray:
    """Boolean keep-mask: one survivor per (image, cluster), the closest to the centroid.

    Ties go to the lower feature index.
    """
    image_index = np.asarray(image_index)
    labels = np.asarray(labels)
    d = _sqdist(np.asarray(features, dtype=float), centroids[labels])
    order = np.lexsort((np.arange(len(labels)), d, labels, image_index))
    keep = np.zeros(len(labels), dtype=bool)
    if len(order) == 0:
        return keep
    key_i, key_l = image_index[order], labels[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (key_i[1:] != key_i[:-1]) | (key_l[1:] != key_l[:-1])
    keep[order[first]] = True
    return keep


def _stack(images: list[ImageFeatures]):
    owner = np.concatenate([np.full(len(im), i) for i, im in enumerate(images)]).astype(int) \
        if images else np.zeros(0, dtype=int)
    local = np.concatenate([np.arange(len(im)) for im in images]).astype(int) \
        if images else np.zeros(0, dtype=int)
    descs = [im.descriptors for im in images if len(im)]
    x = np.concatenate(descs).astype(float) if descs else np.zeros((0, 1))
    return owner, local, x


def _to_labelset(images, owner, local, labels, keep, M, round_t, x) -> PseudoLabelSet:
    out = PseudoLabelSet(round_t, M)
    for i, im in enumerate(images):
        sel = np.flatnonzero((owner == i) & keep)
        out.per_image[im.sample_id] = {
            "positions": np.asarray(im.positions, dtype=float)[local[sel]].reshape(-1, 2),
            "labels": np.asarray(labels)[sel].astype(int),
            "descriptors": x[sel],
            "keypoint_index": local[sel],
        }
    return out


def _pass1_keep(owner, x, K, seed, max_iters):
    cs, lab = kmeans(x, K, seed=seed, max_iters=max_iters)
    return dedupe_per_image(owner, lab, x, cs.centroids)


def recover_correspondence(images: list[ImageFeatures], K: int, M: int, seed: int = 0,
                           round_t: int = 0, max_iters: int = 100) -> PseudoLabelSet:
    """Two-pass constrained clustering; result carries the pass-2 labels."""
    if not M >= K >= 1:
        raise ValueError(f"need M >= K >= 1, got M={M}, K={K}")
    owner, local, x = _stack(images)
    keep1 = _pass1_keep(owner, x, K, seed, max_iters)
    surv = np.flatnonzero(keep1)
    if len(surv) < M:
        raise ValueError(f"only {len(surv)} features survive the K={K} pass; "
                         f"use a smaller M than {M}")
    cs, lab2 = kmeans(x[surv], M, seed=seed + 1, max_iters=max_iters)
    keep2 = dedupe_per_image(owner[surv], lab2, x[surv], cs.centroids)
    labels = np.full(len(x), -1)
    labels[surv] = lab2
    keep = np.zeros(len(x), dtype=bool)
    keep[surv[keep2]] = True
    out = _to_labelset(images, owner, local, labels, keep, M, round_t, x)
    out.centroids = cs
    return out


def flip_labels(original: list[ImageFeatures], flipped: list[ImageFeatures], K: int, M: int,
                seed: int = 0, round_t: int = 0, max_iters: int = 100):
    """Label keypoints on an image and on its mirror with one shared clustering.

    ``flipped[j]`` must hold, row for row, the descriptors of ``original[j]``'s
    keypoints sampled at the mirrored positions of the flipped raster.  The
    K-pass filter runs on the original side; the surviving keypoints are
    clustered jointly (both sides as independent features) and deduplicated
    per side.
    """
    if not M >= K >= 1:
        raise ValueError(f"need M >= K >= 1, got M={M}, K={K}")
    if len(original) != len(flipped):
        raise ValueError("original and flipped feature lists differ in length")
    owner, local, x = _stack(original)
    _, _, xf = _stack(flipped)
    if xf.shape != x.shape:
        raise ValueError("flipped features must mirror the original keypoints row for row")
    keep1 = _pass1_keep(owner, x, K, seed, max_iters)
    surv = np.flatnonzero(keep1)
    if 2 * len(surv) < M:
        raise ValueError(f"only {2 * len(surv)} features survive the K={K} pass; use a smaller M")
    union = np.concatenate([x[surv], xf[surv]])
    cs, lab = kmeans(union, M, seed=seed + 1, max_iters=max_iters)
    n = len(surv)
    sides = []
    for side, (feats, xx) in enumerate([(original, x), (flipped, xf)]):
        lab_side = lab[side * n:(side + 1) * n]
        keep_side = dedupe_per_image(owner[surv], lab_side, xx[surv], cs.centroids)
        labels = np.full(len(xx), -1)
        labels[surv] = lab_side
        keep = np.zeros(len(xx), dtype=bool)
        keep[surv[keep_side]] = True
        ls = _to_labelset(feats, owner, local, labels, keep, M, round_t, xx)
        ls.centroids = cs
        sides.append(ls)
    return sides[0], sides[1]


def cluster_symmetry_map(original: PseudoLabelSet, flipped: PseudoLabelSet) -> tuple[np.ndarray, np.ndarray]:
    """Cluster permutation maximising original/flipped label co-occurrence.

    Co-occurrences pair a keypoint's label in the original image with the
    label of the same keypoint (mirrored) in the flipped image.  Returns
    ``(perm, counts)``: ``counts[a]`` is the co-occurrence backing
    ``a -> perm[a]``; clusters whose row is empty map to themselves with
    count 0 (low confidence).
    """
    if original.M != flipped.M:
        raise ValueError("label sets use different M")
    M = original.M
    co = np.zeros((M, M), dtype=np.int64)
    for sid, rec in original.per_image.items():
        frec = flipped.per_image.get(sid)
        if frec is None:
            raise ValueError(f"sample {sid} missing from flipped labels")
        fmap = dict(zip(np.asarray(frec["keypoint_index"]).tolist(), np.asarray(frec["labels"]).tolist()))
        for ki, a in zip(np.asarray(rec["keypoint_index"]).tolist(), np.asarray(rec["labels"]).tolist()):
            b = fmap.get(ki)
            if b is not None:
                co[a, b] += 1
    # integer weights: co-occurrence dominates, fixed points only break ties
    weight = co * (M + 1) + np.eye(M, dtype=np.int64)
    perm = np.asarray(hungarian(-weight.astype(float)))
    counts = co[np.arange(M), perm]
    return perm, counts


def final_k_clustering(images: list[ImageFeatures], K: int, seed: int = 0,
                       max_iters: int = 100) -> tuple[PseudoLabelSet, CentroidSet]:
    """K-way clustering + per-image dedupe; labels are Stage-2 landmark indices."""
    owner, local, x = _stack(images)
    cs, lab = kmeans(x, K, seed=seed, max_iters=max_iters)
    keep = dedupe_per_image(owner, lab, x, cs.centroids)
    out = _to_labelset(images, owner, local, lab, keep, K, -1, x)
    out.centroids = cs
    return out, cs


def label_with_centroids(images: list[ImageFeatures], centroids: np.ndarray,
                         round_t: int = -1) -> PseudoLabelSet:
    """Nearest-centroid labels plus per-image dedupe (for held-out images)."""
    owner, local, x = _stack(images)
    M = len(centroids)
    if len(x) == 0:
        return _to_labelset(images, owner, local, np.zeros(0, dtype=int), np.zeros(0, dtype=bool),
                            M, round_t, x)
    lab = assign_nearest(x, centroids)
    keep = dedupe_per_image(owner, lab, x, centroids)
    return _to_labelset(images, owner, local, lab, keep, M, round_t, x)


# -------------------------------------------------------------------- I/O

def write_labels(path, labels: PseudoLabelSet) -> None:
    """JSON lines, one image per line; descriptors are not persisted."""
    with open(path, "w") as fh:
        for sid in sorted(labels.per_image):
            rec = labels.per_image[sid]
            pts = [{"x": float(x), "y": float(y), "label": int(l), "keypoint": int(k)}
                   for (x, y), l, k in zip(rec["positions"], rec["labels"], rec["keypoint_index"])]
            fh.write(json.dumps({"sample_id": int(sid), "round": int(labels.round), "M": int(labels.M),
                                 "points": pts}) + "\n")


def read_labels(path) -> PseudoLabelSet:
    out = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if out is None:
            out = PseudoLabelSet(rec["round"], rec.get("M", 0))
        pts = rec["points"]
        out.per_image[rec["sample_id"]] = {
            "positions": np.array([[p["x"], p["y"]] for p in pts], dtype=float).reshape(-1, 2),
            "labels": np.array([p["label"] for p in pts], dtype=int),
            "descriptors": None,
            "keypoint_index": np.array([p.get("keypoint", i) for i, p in enumerate(pts)], dtype=int),
        }
    if out is None:
        raise ValueError(f"{path}: empty label file")
    return out
