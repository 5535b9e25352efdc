"""Self-training loop: equivariance warm-up, alternating clustering/training
rounds (Stage 1) and the K-channel landmark detector (Stage 2)."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import synth
from .correspondence import (ImageFeatures, PseudoLabelSet, cluster_symmetry_map, final_k_clustering,
                             flip_labels, label_with_centroids, read_labels, recover_correspondence,
                             write_labels)
from .keypoints import KeypointSet, outlier_prefilter, Keypoint
from .model import (EmptyDetectedSet, LandmarkNet, ModelDims, PairBatch, RMSprop, contrastive_loss,
                    detector_loss, extract_keypoints, load_checkpoint, render_target, render_targets,
                    sample_descriptor, save_checkpoint, stage2_loss)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingState",
    "Stage2Model",
    "mine_pairs",
    "warmup",
    "descriptor_consistency",
    "stage1_round",
    "run_stage1",
    "run_stage2",
    "infer",
    "compute_features",
    "grid_transform",
]

METRIC_COLUMNS = ["round", "L_d", "L_f", "points_per_image", "n_clusters_used", "max_cluster_size"]


@dataclass
class TrainConfig:
    margin: float = 0.8
    lam: float = 0.1
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    batch_size: int = 16
    warmup_iters: int = 2000
    recluster_every: int = 500
    total_rounds: int = 20
    K: int = 30
    M: int = 100
    flip_augmentation: bool = False
    max_positives: int = 32
    negatives_per_image: int = 32
    r_min: float = 4.0
    transform_pair_prob: float = 0.5
    negative_strategy: str = "same_image"
    correspondence: str = "clustering"
    two_step: bool = False
    sigma: float = 1.0
    nms_threshold: float = 0.25
    nms_window: int = 2
    max_points_factor: int = 3
    warmup_strength: float = 0.6
    warmup_max_rotation: float = float(np.pi / 6)
    outlier_density_k: int = 10
    outlier_drop_fraction: float = 0.05
    kmeans_iters: int = 100
    kmeans_inits: int = 3
    stage2_iters: int = 2000
    stage2_learning_rate: float | None = None
    desc_dim: int = 32
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        for name in ("batch_size", "K", "M", "max_positives", "negatives_per_image", "nms_window",
                     "desc_dim", "hidden", "max_points_factor", "kmeans_inits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("warmup_iters", "recluster_every", "total_rounds", "stage2_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.M < self.K:
            raise ValueError("M must be >= K")
        if self.negative_strategy not in ("same_image", "different_cluster"):
            raise ValueError(f"unknown negative_strategy {self.negative_strategy!r}")
        if self.correspondence not in ("clustering", "equivariance"):
            raise ValueError(f"unknown correspondence {self.correspondence!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingState:
    net: LandmarkNet
    optimizer: RMSprop
    round: int
    labels: PseudoLabelSet
    flipped_labels: PseudoLabelSet | None = None
    metrics_log: list = field(default_factory=list)
    keypoints: list = field(default_factory=list)
    pair_hook: object = None


@dataclass
class Stage2Model:
    net: LandmarkNet
    symmetry: np.ndarray  # channel permutation under horizontal flip
    symmetry_counts: np.ndarray
    centroids: np.ndarray  # (K, d) final clustering centroids
    labels: PseudoLabelSet  # K-way pseudo-labels used for training
    skipped_images: int = 0


# ------------------------------------------------------------------ helpers

def _rasters(corpus) -> np.ndarray:
    return np.stack([s.raster for s in corpus]).astype(np.float32)


def _grid(config_or_net) -> tuple[int, int]:
    d = config_or_net.dims
    return (d.out_h, d.out_w)


def grid_transform(points, g: synth.GeometricTransform, grid) -> np.ndarray:
    """Map output-grid coordinates through a normalized-domain transform."""
    return synth.transform_points(np.asarray(points, dtype=float).reshape(-1, 2), g, grid)


def _inside(points, grid) -> np.ndarray:
    h, w = grid
    return ((points[:, 0] >= 0) & (points[:, 0] <= w - 1) & (points[:, 1] >= 0)
            & (points[:, 1] <= h - 1))


def _mirror(points, grid) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2).copy()
    pts[:, 0] = (grid[1] - 1) - pts[:, 0]
    return pts


def _warp_raster(raster: np.ndarray, g: synth.GeometricTransform) -> np.ndarray:
    size = raster.shape
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    src = synth.to_pixels(g.inverse(synth.to_normalized(pix, size)), size)
    out = ndimage.map_coordinates(raster.astype(float), [src[:, 1], src[:, 0]], order=1, mode="nearest")
    return np.clip(out.reshape(h, w), 0, 1).astype(np.float32)


def _pair_transform(rng, config) -> synth.GeometricTransform:
    return synth.random_transform(rng, config.warmup_strength, max_rotation=config.warmup_max_rotation,
                                  flip_prob=0.0)


def _new_net(config: TrainConfig, image_size: tuple[int, int]) -> LandmarkNet:
    dims = ModelDims(image_size[0], image_size[1], image_size[0] // 2, image_size[1] // 2,
                     config.desc_dim, config.K, config.hidden)
    return LandmarkNet(dims, seed=config.seed)


def _optimizer(config: TrainConfig, lr=None) -> RMSprop:
    return RMSprop(config.learning_rate if lr is None else lr, config.rms_alpha, config.rms_eps,
                   config.weight_decay)


def _rng(config: TrainConfig, *stream) -> np.random.Generator:
    return np.random.default_rng([config.seed, *stream])


def _sample_far(anchors: np.ndarray, n: int, r_min: float, grid, rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` (anchor, location) pairs with the location at least ``r_min`` away."""
    h, w = grid
    if len(anchors) == 0 or n == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    a = anchors[rng.integers(len(anchors), size=n)]
    b = rng.uniform(0, 1, size=(n, 2)) * np.array([w - 1, h - 1])
    for _ in range(100):
        bad = np.linalg.norm(a - b, axis=1) < r_min
        if not bad.any():
            break
        b[bad] = rng.uniform(0, 1, size=(bad.sum(), 2)) * np.array([w - 1, h - 1])
    ok = np.linalg.norm(a - b, axis=1) >= r_min
    return a[ok], b[ok]


def _refs(slot: int, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.column_stack([np.full(len(pts), slot, dtype=float), pts])


def _concat(batches: list[PairBatch]) -> PairBatch:
    def cat(name, width):
        arrs = [getattr(b, name) for b in batches if len(getattr(b, name))]
        return np.concatenate(arrs) if arrs else np.zeros((0, width))
    same = [b.neg_same_image for b in batches if len(b.neg_same_image)]
    return PairBatch(cat("pos_a", 3), cat("pos_b", 3), cat("neg_a", 3), cat("neg_b", 3),
                     np.concatenate(same) if same else np.zeros(0, dtype=bool),
                     tuple(x for b in batches for x in b.slot_ids))


# -------------------------------------------------------------- pair mining

@dataclass
class Slot:
    """One image of a training batch as seen by pair mining."""

    index: int
    sample_id: int
    positions: np.ndarray
    labels: np.ndarray | None = None


def mine_pairs(a: Slot, b: Slot, config: TrainConfig, rng: np.random.Generator, grid,
               transform: synth.GeometricTransform | None = None) -> PairBatch:
    """Positive and negative descriptor pairs for the image pair ``(a, b)``.

    Positives are cross-image keypoints with equal labels, or ``(p, g(p))``
    when ``b`` is ``a`` warped by ``transform``.  With the ``same_image``
    strategy every negative joins two locations of one image at least
    ``r_min`` cells apart; ``different_cluster`` pairs keypoints of the two
    images whose labels differ.
    """
    pa = np.asarray(a.positions, dtype=float).reshape(-1, 2)
    pb = np.asarray(b.positions, dtype=float).reshape(-1, 2)
    if transform is not None:
        q = grid_transform(pa, transform, grid)
        ok = _inside(q, grid)
        pos_a, pos_b = pa[ok], q[ok]
    elif a.sample_id == b.sample_id or a.labels is None or b.labels is None:
        pos_a = pos_b = np.zeros((0, 2))
    else:
        ia, ib = np.nonzero(np.asarray(a.labels)[:, None] == np.asarray(b.labels)[None, :])
        pos_a, pos_b = pa[ia], pb[ib]
    if len(pos_a) > config.max_positives:
        sel = np.sort(rng.choice(len(pos_a), config.max_positives, replace=False))
        pos_a, pos_b = pos_a[sel], pos_b[sel]

    if config.negative_strategy == "same_image":
        negs = []
        for slot, pts in ((a, pa), (b, pb)):
            if slot is b and transform is not None:
                pts = grid_transform(pa, transform, grid)
                pts = pts[_inside(pts, grid)]
            x, y = _sample_far(pts, config.negatives_per_image, config.r_min, grid, rng)
            negs.append((_refs(slot.index, x), _refs(slot.index, y)))
        neg_a = np.concatenate([n[0] for n in negs])
        neg_b = np.concatenate([n[1] for n in negs])
        same = np.ones(len(neg_a), dtype=bool)
    else:
        if a.labels is None or b.labels is None:
            ia = ib = np.zeros(0, dtype=int)
        else:
            ia, ib = np.nonzero(np.asarray(a.labels)[:, None] != np.asarray(b.labels)[None, :])
        if len(ia) > config.negatives_per_image:
            sel = np.sort(rng.choice(len(ia), config.negatives_per_image, replace=False))
            ia, ib = ia[sel], ib[sel]
        neg_a, neg_b = _refs(a.index, pa[ia]), _refs(b.index, pb[ib])
        same = np.zeros(len(neg_a), dtype=bool)
    return PairBatch(_refs(a.index, pos_a), _refs(b.index, pos_b), neg_a, neg_b, same,
                     (a.sample_id, b.sample_id))


# ---------------------------------------------------------------- features

def compute_features(net: LandmarkNet, rasters: np.ndarray, chunk: int = 64):
    """Detector maps ``(N, Ho, Wo)`` and descriptor maps ``(N, Ho, Wo, d)``."""
    dets, feats = [], []
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(rasters), chunk):
            d, f = net(torch.as_tensor(rasters[i:i + chunk], dtype=dtype))
            dets.append(d.numpy())
            feats.append(f.permute(0, 2, 3, 1).numpy())
    return np.concatenate(dets), np.concatenate(feats)


def _descriptors(feature_map: np.ndarray, positions: np.ndarray) -> np.ndarray:
    d = feature_map.shape[-1]
    if len(positions) == 0:
        return np.zeros((0, d))
    return np.stack([sample_descriptor(feature_map, p) for p in positions])


def _image_features(sample_ids, positions, feats) -> list[ImageFeatures]:
    return [ImageFeatures(sid, pos, _descriptors(f, pos)) for sid, pos, f in zip(sample_ids, positions, feats)]


def _cluster(net, corpus, rasters, positions, config: TrainConfig, round_t: int):
    """Descriptors at ``positions`` and the constrained clustering of Eq.-1 type."""
    grid = _grid(net)
    _, feats = compute_features(net, rasters)
    sids = [s.sample_id for s in corpus]
    orig = _image_features(sids, positions, feats)
    seed = config.seed * 1000 + round_t
    if config.flip_augmentation:
        _, ffeats = compute_features(net, np.ascontiguousarray(rasters[:, :, ::-1]))
        mirrored = [_mirror(p, grid) for p in positions]
        flipped = _image_features(sids, mirrored, ffeats)
        lab, flab = flip_labels(orig, flipped, config.K, config.M, seed, round_t, config.kmeans_iters)
        return lab, flab
    lab = recover_correspondence(orig, config.K, config.M, seed, round_t, config.kmeans_iters)
    return lab, None


# ------------------------------------------------------------------ warm-up

def _step(net, optimizer, loss, names):
    params = dict(net.named_parameters())
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}
    optimizer.step(net, grads)


def warmup(corpus, keypoints: list[KeypointSet], config: TrainConfig, pair_hook=None) -> TrainingState:
    """Equivariance pre-training of backbone + descriptor head, then round-0 labels."""
    rasters = _rasters(corpus)
    net = _new_net(config, rasters.shape[1:])
    grid = _grid(net)
    opt = _optimizer(config)
    kp_pos = [np.asarray(k.positions(), dtype=float) for k in keypoints]
    usable = np.array([len(p) > 0 for p in kp_pos])
    if not usable.any():
        raise ValueError("no image has keypoints: nothing to warm up on")
    groups = net.param_groups()
    names = groups["backbone"] + groups["descriptor"]
    rng = _rng(config, 1)
    idx_usable = np.flatnonzero(usable)
    for _ in range(config.warmup_iters):
        picks = rng.choice(idx_usable, size=min(config.batch_size, len(idx_usable)), replace=False)
        B = len(picks)
        xs = [rasters[j] for j in picks]
        batches = []
        for slot, j in enumerate(picks):
            g = _pair_transform(rng, config)
            xs.append(_warp_raster(rasters[j], g))
            a = Slot(slot, corpus[j].sample_id, kp_pos[j])
            b = Slot(B + slot, corpus[j].sample_id, np.zeros((0, 2)))
            batches.append(mine_pairs(a, b, config, rng, grid, transform=g))
        pb = _concat(batches)
        if pair_hook is not None:
            pair_hook(pb)
        if pb.n_pos + pb.n_neg == 0:
            continue
        _, feats = net(torch.as_tensor(np.stack(xs)))
        loss = contrastive_loss(pb, feats, config.margin)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite loss during warm-up")
        _step(net, opt, loss, names)

    positions = kp_pos
    if config.outlier_drop_fraction > 0:
        _, feats = compute_features(net, rasters)
        sets = []
        for s, pos, f in zip(corpus, positions, feats):
            descs = _descriptors(f, pos)
            sets.append(KeypointSet(s.sample_id, [Keypoint(float(x), float(y), 1.0, d)
                                                  for (x, y), d in zip(pos, descs)]))
        n_total = sum(len(s) for s in sets)
        if n_total > config.outlier_density_k:
            sets = outlier_prefilter(sets, config.outlier_density_k, config.outlier_drop_fraction)
            positions = [s.positions() for s in sets]
    labels, flabels = _cluster(net, corpus, rasters, positions, config, 0)
    state = TrainingState(net, opt, 0, labels, flabels, [], list(keypoints), pair_hook)
    state.metrics_log.append(_metrics_record(0, float("nan"), float("nan"), labels))
    return state


def descriptor_consistency(net: LandmarkNet, corpus, keypoints: list[KeypointSet], config: TrainConfig,
                           seed: int = 0) -> float:
    """Mean cosine similarity between descriptors at keypoints and at their images under
    a random warm-up transform (points leaving the grid are skipped)."""
    rasters = _rasters(corpus)
    grid = _grid(net)
    rng = np.random.default_rng(seed)
    warped = []
    maps = []
    for r in rasters:
        g = _pair_transform(rng, config)
        warped.append(_warp_raster(r, g))
        maps.append(g)
    _, fa = compute_features(net, rasters)
    _, fb = compute_features(net, np.stack(warped))
    sims = []
    for k, g, a, b in zip(keypoints, maps, fa, fb):
        pos = np.asarray(k.positions(), dtype=float).reshape(-1, 2)
        moved = grid_transform(pos, g, grid)
        keep = _inside(moved, grid)
        if not keep.any():
            continue
        da, db = _descriptors(a, pos[keep]), _descriptors(b, moved[keep])
        sims.append(np.sum(da * db, axis=1))
    if not sims:
        raise ValueError("no keypoint survived the transforms")
    return float(np.concatenate(sims).mean())


def _metrics_record(round_t, ld, lf, labels: PseudoLabelSet) -> dict:
    sizes = labels.cluster_sizes()
    return {"round": int(round_t), "L_d": float(ld), "L_f": float(lf),
            "points_per_image": float(labels.points_per_image()),
            "n_clusters_used": int((sizes > 0).sum()), "max_cluster_size": int(sizes.max(initial=0))}


# ------------------------------------------------------------------ stage 1

def _slot_view(state: TrainingState, corpus_index: int, sample_id: int, flipped: bool, grid):
    src = state.flipped_labels if flipped else state.labels
    rec = src.per_image[sample_id]
    pos = rec["positions"]
    if flipped:
        pos = _mirror(pos, grid)
    return pos, rec["labels"]


def stage1_round(state: TrainingState, corpus, config: TrainConfig, rasters=None) -> TrainingState:
    """``recluster_every`` optimizer steps on the current pseudo-labels, then re-label.

    Losses: ``lam * L_d`` (heatmaps at labelled positions) and ``L_f``
    (contrastive), summed in one step or applied as two consecutive steps
    when ``config.two_step``.  A non-finite loss ends the round early with
    the last finite parameters.
    """
    rasters = _rasters(corpus) if rasters is None else rasters
    net, opt = state.net, state.optimizer
    grid = _grid(net)
    groups = net.param_groups()
    t = state.round + 1
    rng = _rng(config, 2, t)
    sid_index = {s.sample_id: i for i, s in enumerate(corpus)}
    labelled = np.array([len(state.labels.per_image.get(s.sample_id, {"labels": []})["labels"]) > 0
                         for s in corpus])
    pool = np.flatnonzero(labelled)
    if len(pool) == 0:
        raise ValueError("no labelled images in the corpus")
    ld_hist, lf_hist = [], []
    snapshot = None
    for _ in range(config.recluster_every):
        picks = rng.choice(pool, size=min(config.batch_size, len(pool)), replace=False)
        B = len(picks)
        xs, targets, slots = [], [], []
        for slot, j in enumerate(picks):
            flipped = bool(config.flip_augmentation and rng.random() < 0.5)
            x = rasters[j][:, ::-1] if flipped else rasters[j]
            pos, lab = _slot_view(state, j, corpus[j].sample_id, flipped, grid)
            xs.append(np.ascontiguousarray(x))
            slots.append(Slot(slot, corpus[j].sample_id, pos, lab))
        batches = []
        for slot in range(B):
            a = slots[slot]
            use_transform = config.correspondence == "equivariance" or rng.random() < config.transform_pair_prob
            if use_transform:
                g = _pair_transform(rng, config)
                xs.append(_warp_raster(xs[slot], g))
                q = grid_transform(a.positions, g, grid)
                ok = _inside(q, grid)
                b = Slot(B + slot, a.sample_id, q[ok], a.labels[ok])
                batches.append(mine_pairs(a, b, config, rng, grid, transform=g))
            else:
                j2 = int(rng.choice(pool))
                flipped = bool(config.flip_augmentation and rng.random() < 0.5)
                x2 = rasters[j2][:, ::-1] if flipped else rasters[j2]
                pos2, lab2 = _slot_view(state, j2, corpus[j2].sample_id, flipped, grid)
                xs.append(np.ascontiguousarray(x2))
                b = Slot(B + slot, corpus[j2].sample_id, pos2, lab2)
                if b.sample_id == a.sample_id:
                    b = replace(b, sample_id=-1 - a.sample_id) if flipped else b
                batches.append(mine_pairs(a, b, config, rng, grid))
            slots.append(b)
        for s in slots:
            targets.append(render_target(s.positions, config.sigma, grid))
        pb = _concat(batches)
        if state.pair_hook is not None:
            state.pair_hook(pb)
        x_t = torch.as_tensor(np.stack(xs))
        tgt = torch.as_tensor(np.stack(targets), dtype=torch.float32)
        prev = {k: v.clone() for k, v in net.state_dict().items()}
        prev_opt = {k: v.clone() for k, v in opt.state.items()}
        det, feats = net(x_t)
        l_d = detector_loss(det, tgt)
        l_f = contrastive_loss(pb, feats, config.margin) if pb.n_pos + pb.n_neg else feats.sum() * 0
        if not (torch.isfinite(l_d) and torch.isfinite(l_f)):
            log.warning("round %d: non-finite loss, ending round early", t)
            snapshot = (prev, prev_opt)
            break
        if config.two_step:
            _step(net, opt, config.lam * l_d, groups["backbone"] + groups["detector"])
            det, feats = net(x_t)
            l_f = contrastive_loss(pb, feats, config.margin) if pb.n_pos + pb.n_neg else feats.sum() * 0
            _step(net, opt, l_f, groups["backbone"] + groups["descriptor"])
        else:
            _step(net, opt, config.lam * l_d + l_f,
                  groups["backbone"] + groups["detector"] + groups["descriptor"])
        ld_hist.append(l_d.item())
        lf_hist.append(l_f.item())
    if snapshot is not None:
        net.load_state_dict(snapshot[0])
        opt.state = snapshot[1]

    positions = detect_positions(net, rasters, config)
    labels, flabels = _cluster(net, corpus, rasters, positions, config, t)
    state.labels, state.flipped_labels, state.round = labels, flabels, t
    state.metrics_log.append(_metrics_record(
        t, np.mean(ld_hist) if ld_hist else float("nan"), np.mean(lf_hist) if lf_hist else float("nan"),
        labels))
    return state


def detect_positions(net: LandmarkNet, rasters: np.ndarray, config: TrainConfig) -> list[np.ndarray]:
    dets, _ = compute_features(net, rasters)
    out = []
    for d in dets:
        kp = extract_keypoints(d, config.nms_threshold, config.nms_window, config.max_points_factor * config.K)
        out.append(kp[:, :2])
    return out


# ------------------------------------------------------------- run dirs

def _write_metrics(run_dir: Path, metrics_log: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rec in metrics_log:
        w.writerow([rec["round"]] + [repr(float(rec[c])) if isinstance(rec[c], float) else rec[c]
                                     for c in METRIC_COLUMNS[1:]])
    (run_dir / "metrics.csv").write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for r in csv.DictReader(fh):
            rows.append({"round": int(r["round"]), "L_d": float(r["L_d"]), "L_f": float(r["L_f"]),
                         "points_per_image": float(r["points_per_image"]),
                         "n_clusters_used": int(r["n_clusters_used"]),
                         "max_cluster_size": int(r["max_cluster_size"])})
    return rows


def _persist_round(run_dir: Path, state: TrainingState, wall: float) -> None:
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "labels").mkdir(parents=True, exist_ok=True)
    t = state.round
    write_labels(run_dir / "labels" / f"round_{t}.jsonl", state.labels)
    if state.flipped_labels is not None:
        write_labels(run_dir / "labels" / f"round_{t}_flipped.jsonl", state.flipped_labels)
    _write_metrics(run_dir, state.metrics_log)
    with open(run_dir / "timing.csv", "a") as fh:
        fh.write(f"{t},{wall:.3f}\n")
    # checkpoint last: its presence marks the round as complete
    save_checkpoint(run_dir / "checkpoints" / f"round_{t}.ktl", state.net, state.optimizer, t)


def latest_round(run_dir) -> int | None:
    ck = sorted(Path(run_dir, "checkpoints").glob("round_*.ktl"),
                key=lambda p: int(p.stem.split("_")[1]))
    return int(ck[-1].stem.split("_")[1]) if ck else None


def resume_state(run_dir, config: TrainConfig, keypoints) -> TrainingState:
    run_dir = Path(run_dir)
    t = latest_round(run_dir)
    if t is None:
        raise FileNotFoundError(f"no checkpoint in {run_dir / 'checkpoints'}")
    net, opt, rt, _ = load_checkpoint(run_dir / "checkpoints" / f"round_{t}.ktl")
    if rt != t:
        raise ValueError(f"checkpoint round_{t}.ktl records round {rt}")
    labels = read_labels(run_dir / "labels" / f"round_{t}.jsonl")
    flabels = None
    if config.flip_augmentation:
        flabels = read_labels(run_dir / "labels" / f"round_{t}_flipped.jsonl")
    metrics = [r for r in read_metrics(run_dir / "metrics.csv") if r["round"] <= t]
    return TrainingState(net, opt or _optimizer(config), t, labels, flabels, metrics, list(keypoints))


def run_stage1(corpus, keypoints, config: TrainConfig, run_dir=None, resume: bool = False,
               pair_hook=None, round_callback=None, stop_after: int | None = None) -> TrainingState:
    """Warm-up followed by ``total_rounds`` Stage-1 rounds.

    With ``run_dir`` every completed round is persisted (checkpoint, labels,
    metrics) and ``resume=True`` continues from the latest checkpoint.
    ``stop_after`` interrupts the run after that round (for testing resumes).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    rasters = _rasters(corpus)
    t0 = time.perf_counter()
    if resume and run_dir is not None and latest_round(run_dir) is not None:
        state = resume_state(run_dir, config, keypoints)
        state.pair_hook = pair_hook
    else:
        state = warmup(corpus, keypoints, config, pair_hook=pair_hook)
        if run_dir is not None:
            _persist_round(run_dir, state, time.perf_counter() - t0)
        if round_callback is not None:
            round_callback(state)
    while state.round < config.total_rounds:
        if stop_after is not None and state.round >= stop_after:
            break
        t0 = time.perf_counter()
        state = stage1_round(state, corpus, config, rasters)
        log.info("round %d: ppi=%.2f L_d=%.4f L_f=%.4f", state.round,
                 state.metrics_log[-1]["points_per_image"], state.metrics_log[-1]["L_d"],
                 state.metrics_log[-1]["L_f"])
        if run_dir is not None:
            _persist_round(run_dir, state, time.perf_counter() - t0)
        if round_callback is not None:
            round_callback(state)
    return state


# ------------------------------------------------------------------ stage 2

def stage1_features(state: TrainingState, corpus, rasters=None) -> list[ImageFeatures]:
    """Descriptors of the current pseudo-labelled keypoints under the frozen model."""
    rasters = _rasters(corpus) if rasters is None else rasters
    _, feats = compute_features(state.net, rasters)
    out = []
    for s, f in zip(corpus, feats):
        pos = state.labels.per_image[s.sample_id]["positions"]
        out.append(ImageFeatures(s.sample_id, pos, _descriptors(f, pos)))
    return out


def run_stage2(state: TrainingState, corpus, config: TrainConfig, flip_symmetry: bool | None = None) -> Stage2Model:
    """Final K-way clustering and heatmap regression of the K-channel head.

    Channels without a pseudo-label in an image are masked out of its loss.
    With flip augmentation, mirrored images permute target channels by the
    cluster symmetry map measured between original and flipped descriptors.
    """
    rasters = _rasters(corpus)
    grid = _grid(state.net)
    K = config.K
    feats_orig = stage1_features(state, corpus, rasters)
    labels, cs = final_k_clustering(feats_orig, K, seed=config.seed * 1000 + 999,
                                    max_iters=config.kmeans_iters)
    use_flip = config.flip_augmentation if flip_symmetry is None else flip_symmetry
    perm = np.arange(K)
    counts = np.zeros(K, dtype=int)
    if use_flip:
        _, ffeats = compute_features(state.net, np.ascontiguousarray(rasters[:, :, ::-1]))
        flipped = []
        for s, f in zip(corpus, ffeats):
            pos = _mirror(state.labels.per_image[s.sample_id]["positions"], grid)
            flipped.append(ImageFeatures(s.sample_id, pos, _descriptors(f, pos)))
        flab = label_with_centroids(flipped, cs.centroids)
        perm, counts = cluster_symmetry_map(labels, flab)

    net = copy.deepcopy(state.net)
    net.add_stage2_head(config.seed + 2)
    opt = _optimizer(config, config.stage2_learning_rate)
    names = net.param_groups()["backbone"] + net.param_groups()["stage2"]

    chan_pts, detected = [], []
    for s in corpus:
        rec = labels.per_image[s.sample_id]
        pts = [np.zeros((0, 2)) for _ in range(K)]
        mask = np.zeros(K, dtype=bool)
        for p, k in zip(rec["positions"], rec["labels"]):
            pts[k] = np.asarray(p, dtype=float)[None]
            mask[k] = True
        chan_pts.append(pts)
        detected.append(mask)
    detected = np.array(detected)
    pool = np.flatnonzero(detected.any(axis=1))
    skipped = len(corpus) - len(pool)
    if len(pool) == 0:
        raise EmptyDetectedSet("no image has a detected landmark")
    rng = _rng(config, 3)
    for _ in range(config.stage2_iters):
        picks = rng.choice(pool, size=min(config.batch_size, len(pool)), replace=False)
        xs, tg, mk = [], [], []
        for j in picks:
            pts, mask = chan_pts[j], detected[j]
            if use_flip and rng.random() < 0.5:
                xs.append(np.ascontiguousarray(rasters[j][:, ::-1]))
                fpts = [None] * K
                fmask = np.zeros(K, dtype=bool)
                for k in range(K):
                    fpts[perm[k]] = _mirror(pts[k], grid) if len(pts[k]) else pts[k]
                    fmask[perm[k]] = mask[k]
                pts, mask = fpts, fmask
            else:
                xs.append(rasters[j])
            tg.append(render_targets(pts, config.sigma, grid))
            mk.append(mask)
        pred = net.stage2(torch.as_tensor(np.stack(xs)))
        loss = stage2_loss(pred, torch.as_tensor(np.stack(tg), dtype=pred.dtype),
                           torch.as_tensor(np.stack(mk)))
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite Stage-2 loss")
        _step(net, opt, loss, names)
    return Stage2Model(net, perm, counts, cs.centroids, labels, skipped)


def infer(model: Stage2Model | LandmarkNet, raster, test_flip: bool = False, symmetry=None) -> np.ndarray:
    """K landmarks ``(x, y, confidence)`` on the output grid, one per channel (argmax)."""
    net = model.net if isinstance(model, Stage2Model) else model
    perm = model.symmetry if isinstance(model, Stage2Model) and symmetry is None else symmetry
    x = np.asarray(raster, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    with torch.no_grad():
        maps = net.stage2(torch.as_tensor(x)).numpy().astype(float)
        if test_flip:
            fm = net.stage2(torch.as_tensor(np.ascontiguousarray(x[:, :, ::-1]))).numpy().astype(float)
            fm = fm[:, :, :, ::-1]
            perm = np.arange(maps.shape[1]) if perm is None else np.asarray(perm)
            maps = 0.5 * (maps + fm[:, perm])
    n, K, h, w = maps.shape
    flat = maps.reshape(n, K, -1)
    idx = flat.argmax(axis=2)
    out = np.stack([idx % w, idx // w, np.take_along_axis(flat, idx[..., None], 2)[..., 0]], axis=-1)
    out = out.astype(float)
    return out[0] if single else out
