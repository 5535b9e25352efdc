"""Glue between training and evaluation: landmark matrices from trained models."""
from __future__ import annotations

import numpy as np

from . import synth
from .completion import LandmarkMatrix, fill_with_means, svt_complete
from .correspondence import ImageFeatures, PseudoLabelSet, final_k_clustering, label_with_centroids
from .evaluation import EvalReport, forward_backward_eval, normalizers, raw_landmark_metrics
from .training import (Stage2Model, TrainConfig, TrainingState, _descriptors, _rasters, compute_features,
                       detect_positions, infer, stage1_features)

__all__ = ["grid_to_pixels", "stage1_landmarks", "stage2_landmarks", "evaluate_landmarks",
           "evaluate_stage1", "evaluate_stage2", "gt_matrix"]


# Pseudo-inverse cutoff for the forward regressor on Stage-1 landmarks.
# Their training matrix is partly filled by low-rank completion, which can
# leave directions ~1e-4 below the top singular value; test gaps are filled
# with means instead, so a 1e-10 cutoff lets those directions blow up.
COMPLETED_RCOND = 1e-3


def grid_to_pixels(points, grid, image_size) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    shape = pts.shape
    out = synth.to_pixels(synth.to_normalized(pts.reshape(-1, 2), grid), image_size)
    return out.reshape(shape)


def gt_matrix(corpus) -> np.ndarray:
    return np.stack([np.asarray(s.gt_landmarks, dtype=float) for s in corpus])


def _matrix(labels: PseudoLabelSet, corpus, K, grid, size) -> LandmarkMatrix:
    vals = np.zeros((K, len(corpus), 2))
    missing = np.ones((K, len(corpus)), dtype=bool)
    for j, s in enumerate(corpus):
        rec = labels.per_image.get(s.sample_id)
        if rec is None:
            continue
        for p, k in zip(rec["positions"], rec["labels"]):
            vals[int(k), j] = grid_to_pixels(p, grid, size)
            missing[int(k), j] = False
    return LandmarkMatrix(vals, missing)


def stage1_landmarks(state: TrainingState, train_corpus, test_corpus, config: TrainConfig):
    """K discovered landmarks per image (pixel coords) from a Stage-1 model.

    Training images: final K-way clustering of the pseudo-labelled keypoints,
    gaps completed by singular value thresholding.  Test images: detected
    keypoints labelled by the nearest of the K centroids, gaps filled with
    the training mean.  Returns ``(train (N,K,2), test (n,K,2), raw_test)``
    where ``raw_test`` keeps NaN at the gaps, and the training images kept
    (those with at least one landmark).
    """
    grid = (state.net.dims.out_h, state.net.dims.out_w)
    size = (state.net.dims.in_h, state.net.dims.in_w)
    K = config.K
    feats = stage1_features(state, train_corpus)
    keep = np.array([len(f) > 0 for f in feats])
    kept = [s for s, k in zip(train_corpus, keep) if k]
    labels, cs = final_k_clustering([f for f, k in zip(feats, keep) if k], K,
                                    seed=config.seed * 1000 + 999, max_iters=config.kmeans_iters)
    train = svt_complete(_matrix(labels, kept, K, grid, size))
    means = train.values.mean(axis=1)

    rasters = _rasters(test_corpus)
    positions = detect_positions(state.net, rasters, config)
    _, tfeat = compute_features(state.net, rasters)
    timgs = [ImageFeatures(s.sample_id, p, _descriptors(f, p)) for s, p, f in zip(test_corpus, positions, tfeat)]
    tlab = label_with_centroids(timgs, cs.centroids)
    raw = _matrix(tlab, test_corpus, K, grid, size)
    test = fill_with_means(raw, means)
    raw_vals = np.where(raw.missing[..., None], np.nan, raw.values)
    return (train.values.transpose(1, 0, 2), test.values.transpose(1, 0, 2),
            raw_vals.transpose(1, 0, 2), keep)


def stage2_landmarks(model: Stage2Model, corpus, test_flip: bool = False) -> np.ndarray:
    net = model.net
    grid = (net.dims.out_h, net.dims.out_w)
    size = (net.dims.in_h, net.dims.in_w)
    out = infer(model, _rasters(corpus), test_flip=test_flip)
    return grid_to_pixels(out[..., :2], grid, size)


def evaluate_landmarks(train_unsup, train_gt, test_unsup, test_gt, normalizer_kind="interocular",
                       eye_indices=synth.EYE_INDICES, raw_test=None, thresholds=(0.05, 0.1),
                       forward_rcond: float | None = None) -> EvalReport:
    """Forward/backward report with regressors fit on the training images."""
    u = np.concatenate([train_unsup, test_unsup])
    g = np.concatenate([train_gt, test_gt])
    n = len(train_unsup)
    train_idx, test_idx = np.arange(n), np.arange(n, len(u))
    report = forward_backward_eval(u, g, train_idx, test_idx, normalizer_kind, eye_indices,
                                   forward_rcond=forward_rcond)
    norms = normalizers(g, normalizer_kind, eye_indices)
    raw_u = u if raw_test is None else np.concatenate([train_unsup, raw_test])
    report.extra["raw"] = raw_landmark_metrics(raw_u, g, norms, train_idx, test_idx, list(thresholds))
    return report


def evaluate_stage1(state: TrainingState, train_corpus, test_corpus, config: TrainConfig,
                    normalizer_kind="interocular") -> EvalReport:
    tr, te, raw, keep = stage1_landmarks(state, train_corpus, test_corpus, config)
    gtr = gt_matrix(train_corpus)[keep]
    rep = evaluate_landmarks(tr, gtr, te, gt_matrix(test_corpus), normalizer_kind, raw_test=raw,
                             forward_rcond=COMPLETED_RCOND)
    rep.extra["stage"] = 1
    rep.extra["round"] = int(state.round)
    return rep


def evaluate_stage2(model: Stage2Model, train_corpus, test_corpus, test_flip=False,
                    normalizer_kind="interocular") -> EvalReport:
    tr = stage2_landmarks(model, train_corpus, test_flip)
    te = stage2_landmarks(model, test_corpus, test_flip)
    rep = evaluate_landmarks(tr, gt_matrix(train_corpus), te, gt_matrix(test_corpus), normalizer_kind)
    rep.extra["stage"] = 2
    rep.extra["test_flip"] = bool(test_flip)
    rep.extra["points_per_image"] = float(np.isfinite(te).all(axis=-1).sum(axis=1).mean())
    return rep
