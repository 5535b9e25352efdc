"""Evaluation of discovered landmarks against annotations.

Discovered landmarks are compared to annotated ones through linear maps with
no bias, fit on a training split: forward (discovered -> annotated) and
backward (annotated -> discovered).  Errors are mean Euclidean distances
divided by a per-image normaliser, in percent.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .matching import hungarian, pad_square

__all__ = [
    "LinearRegressor",
    "EvalReport",
    "fit_regressor",
    "nme",
    "per_image_nme",
    "normalizers",
    "forward_backward_eval",
    "ced_curve",
    "raw_landmark_metrics",
]


@dataclass
class LinearRegressor:
    """``vec(target) = W @ vec(source)`` with coordinates flattened as x0, y0, x1, ..."""

    W: np.ndarray

    def predict(self, source: np.ndarray) -> np.ndarray:
        src = np.asarray(source, dtype=float)
        flat = src.reshape(len(src), -1)
        return (flat @ self.W.T).reshape(len(src), -1, 2)


def fit_regressor(unsup, gt, rcond: float = 1e-10) -> LinearRegressor:
    """Least-squares ``gt ~ W unsup`` without bias (minimum-norm on rank deficiency)."""
    u = np.asarray(unsup, dtype=float)
    g = np.asarray(gt, dtype=float)
    if len(u) == 0 or len(g) == 0:
        raise ValueError("fit_regressor needs at least one training image")
    if len(u) != len(g):
        raise ValueError("unsup and gt must cover the same images")
    U = u.reshape(len(u), -1)
    G = g.reshape(len(g), -1)
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(G))):
        raise ValueError("regressor inputs must be complete (fill missing entries first)")
    Wt = np.linalg.pinv(U, rcond=rcond) @ G
    return LinearRegressor(Wt.T)


def nme(predicted, gt, normalizer: float) -> float:
    """Mean point-to-point Euclidean error over ``normalizer``, in percent."""
    p = np.asarray(predicted, dtype=float).reshape(-1, 2)
    g = np.asarray(gt, dtype=float).reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError("predicted and gt differ in point count")
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    return float(np.linalg.norm(p - g, axis=1).mean() / normalizer * 100.0)


def per_image_nme(predicted, gt, norms) -> np.ndarray:
    p = np.asarray(predicted, dtype=float)
    g = np.asarray(gt, dtype=float)
    err = np.linalg.norm(p - g, axis=-1)  # (n, K)
    return err.mean(axis=1) / np.asarray(norms) * 100.0


def normalizers(gt, kind: str = "interocular", eye_indices=(0, 1), custom=None) -> np.ndarray:
    g = np.asarray(gt, dtype=float)
    if kind == "interocular":
        out = np.linalg.norm(g[:, eye_indices[0]] - g[:, eye_indices[1]], axis=1)
    elif kind == "bbox_sqrt_area":
        ext = g.max(axis=1) - g.min(axis=1)
        out = np.sqrt(ext[:, 0] * ext[:, 1])
    elif kind == "custom":
        if custom is None:
            raise ValueError("custom normalizer requires explicit values")
        out = np.broadcast_to(np.asarray(custom, dtype=float), (len(g),)).copy()
    else:
        raise ValueError(f"unknown normalizer kind {kind!r}")
    if np.any(out <= 0):
        raise ValueError("zero normalizer")
    return out


def ced_curve(errors, n_thresholds: int = 51) -> list[tuple[float, float]]:
    """Cumulative fraction of errors at or below evenly spaced thresholds up to the max."""
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if len(e) == 0:
        return []
    top = float(e[-1])
    ts = np.linspace(0.0, top, n_thresholds)
    frac = np.searchsorted(e, ts, side="right") / len(e)
    frac[-1] = 1.0
    return [(float(t), float(f)) for t, f in zip(ts, frac)]


@dataclass
class EvalReport:
    forward_nme: float
    backward_nme: float
    ced: list
    per_landmark_accuracy: list
    matching: list
    normalizer_kind: str
    ced_backward: list = field(default_factory=list)
    per_landmark_error: list = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ced", "ced_backward"):
            fr = [f for _, f in getattr(self, name)]
            if any(f < 0 or f > 1 for f in fr) or any(b < a for a, b in zip(fr, fr[1:])):
                raise ValueError(f"{name} fractions must be non-decreasing within [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ced"] = [list(p) for p in self.ced]
        d["ced_backward"] = [list(p) for p in self.ced_backward]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["forward_nme", "backward_nme", "ced", "per_landmark_accuracy", "matching",
                 "normalizer_kind"],
    "properties": {
        "forward_nme": {"type": "number", "minimum": 0},
        "backward_nme": {"type": "number", "minimum": 0},
        "ced": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                           "minItems": 2, "maxItems": 2}},
        "ced_backward": {"type": "array"},
        "per_landmark_accuracy": {"type": "array", "items": {"type": "number", "minimum": 0,
                                                             "maximum": 1}},
        "per_landmark_error": {"type": "array", "items": {"type": "number"}},
        "matching": {"type": "array", "items": {"type": "integer"}},
        "normalizer_kind": {"enum": ["interocular", "bbox_sqrt_area", "custom"]},
        "n_train": {"type": "integer"},
        "n_test": {"type": "integer"},
        "extra": {"type": "object"},
    },
}


def forward_backward_eval(unsup, gt, train_idx, test_idx, normalizer_kind: str = "interocular",
                          eye_indices=(0, 1), custom_norm=None,
                          accuracy_threshold: float = 0.1, rcond: float = 1e-10,
                          forward_rcond: float | None = None) -> EvalReport:
    """Forward/backward NME with regressors fit on ``train_idx``, scored on ``test_idx``.

    ``unsup`` is ``(N, Ku, 2)`` and must be complete; ``gt`` is ``(N, Kg, 2)``.
    Both directions use the ground-truth normaliser of each test image.
    ``rcond`` is the pseudo-inverse cutoff relative to the top singular
    value; ``forward_rcond`` overrides it for the unsup -> gt fit.
    """
    u = np.asarray(unsup, dtype=float)
    g = np.asarray(gt, dtype=float)
    train_idx, test_idx = np.asarray(train_idx), np.asarray(test_idx)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train and test splits overlap")
    norms = normalizers(g, normalizer_kind, eye_indices, custom_norm)
    fwd = fit_regressor(u[train_idx], g[train_idx], rcond if forward_rcond is None else forward_rcond)
    bwd = fit_regressor(g[train_idx], u[train_idx], rcond)
    pred_g = fwd.predict(u[test_idx])
    pred_u = bwd.predict(g[test_idx])
    nt = norms[test_idx]
    f_err = np.linalg.norm(pred_g - g[test_idx], axis=-1) / nt[:, None] * 100  # (n, Kg)
    b_err = np.linalg.norm(pred_u - u[test_idx], axis=-1) / nt[:, None] * 100  # (n, Ku)
    raw = raw_landmark_metrics(u, g, norms, train_idx, test_idx, [accuracy_threshold])
    acc = (f_err <= accuracy_threshold * 100).mean(axis=0)
    return EvalReport(
        forward_nme=float(f_err.mean()),
        backward_nme=float(b_err.mean()),
        ced=ced_curve(f_err.mean(axis=0)),
        ced_backward=ced_curve(b_err.mean(axis=0)),
        per_landmark_accuracy=[float(a) for a in acc],
        per_landmark_error=[float(e) for e in f_err.mean(axis=0)],
        matching=[int(m) for m in raw["matching_unsup_to_gt"]],
        normalizer_kind=normalizer_kind,
        n_train=int(len(train_idx)),
        n_test=int(len(test_idx)),
    )


def raw_landmark_metrics(unsup, gt, norms, match_idx, test_idx, thresholds) -> dict:
    """Hungarian-matched accuracy, precision and PCK of raw discovered landmarks.

    Missing discovered landmarks are NaN.  Matching minimises the mean
    distance over ``match_idx``; ``thresholds`` are fractions of the
    normaliser.  Returns per-threshold lists keyed ``accuracy`` (per gt
    point), ``precision`` and ``pck``.
    """
    u = np.asarray(unsup, dtype=float)
    g = np.asarray(gt, dtype=float)
    norms = np.asarray(norms, dtype=float)
    Ku, Kg = u.shape[1], g.shape[1]
    dist = np.linalg.norm(g[match_idx][:, :, None, :] - u[match_idx][:, None, :, :], axis=-1)
    seen = np.isfinite(dist)
    cnt = seen.sum(axis=0)
    total = np.where(seen, dist, 0.0).sum(axis=0)
    cost = np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)
    big = (np.nanmax(cost) if np.isfinite(cost).any() else 1.0) * 10 + 1
    cost = np.where(np.isfinite(cost), cost, big)
    perm = hungarian(pad_square(cost, fill=0.0))
    gt_to_unsup = np.array([perm[k] if perm[k] < Ku and cost[k, perm[k]] < big else -1
                            for k in range(Kg)])
    unsup_to_gt = np.full(Ku, -1)
    for k, j in enumerate(gt_to_unsup):
        if j >= 0:
            unsup_to_gt[j] = k
    ut, gtt, nt = u[test_idx], g[test_idx], norms[test_idx]
    out = {"thresholds": [float(t) for t in thresholds], "matching_gt_to_unsup": gt_to_unsup.tolist(),
           "matching_unsup_to_gt": unsup_to_gt.tolist(), "accuracy": [], "precision": [], "pck": []}
    all_d = np.linalg.norm(ut[:, :, None, :] - gtt[:, None, :, :], axis=-1).min(axis=2)  # (n, Ku)
    present = np.isfinite(all_d)
    for thr in thresholds:
        radius = thr * nt
        acc = np.zeros(Kg)
        for k, j in enumerate(gt_to_unsup):
            if j < 0:
                continue
            d = np.linalg.norm(ut[:, j] - gtt[:, k], axis=-1)
            acc[k] = np.mean(np.where(np.isfinite(d), d <= radius, False))
        within = np.where(present, all_d <= radius[:, None], False)
        prec = float(within.sum() / max(present.sum(), 1))
        out["accuracy"].append(acc.tolist())
        out["precision"].append(prec)
        out["pck"].append(float(acc.mean()))
    return out
