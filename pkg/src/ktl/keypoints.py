"""Initial (unindexed) keypoint sets: noise-mixture initialisation, external
detector ingestion, ANMS and descriptor-density outlier filtering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .synth import ImageSample

__all__ = [
    "Keypoint",
    "KeypointSet",
    "gt_on_grid",
    "init_mixture",
    "anms_filter",
    "suppression_radii",
    "outlier_prefilter",
    "read_keypoint_file",
    "write_keypoint_file",
]


@dataclass
class Keypoint:
    x: float
    y: float
    confidence: float = 1.0
    descriptor: np.ndarray | None = None
    cluster_label: int | None = None

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class KeypointSet:
    sample_id: int
    points: list[Keypoint] = field(default_factory=list)
    source: str = "synthetic_mixture"

    def __len__(self):
        return len(self.points)

    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.points], dtype=float).reshape(-1, 2)

    def confidences(self) -> np.ndarray:
        return np.array([p.confidence for p in self.points], dtype=float)

    def descriptors(self) -> np.ndarray:
        return np.stack([p.descriptor for p in self.points]) if self.points else np.zeros((0, 0))


def gt_on_grid(sample: ImageSample, grid: tuple[int, int]) -> np.ndarray:
    """Ground-truth landmarks mapped from raster pixels onto the output grid."""
    h, w = sample.raster.shape
    gh, gw = grid
    pts = (sample.gt_landmarks + 0.5) / np.array([w, h])
    return pts * np.array([gw, gh]) - 0.5


def init_mixture(sample: ImageSample, n_points: int, real_ratio: float, jitter_px: float,
                 seed: int, grid: tuple[int, int] = (32, 32),
                 real_confidence: float = 1.0, random_confidence: float = 0.5) -> KeypointSet:
    """Mix jittered ground-truth landmarks with uniformly random points.

    Exactly ``round(real_ratio * n_points)`` points are real.  ``jitter_px``
    is measured in raster pixels and converted to grid cells; real points are
    drawn without replacement from the visible landmarks.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not 0.0 <= real_ratio <= 1.0:
        raise ValueError("real_ratio must lie in [0, 1]")
    rng = np.random.default_rng([seed, sample.sample_id])
    n_real = int(round(real_ratio * n_points))
    gh, gw = grid
    cands = np.flatnonzero(sample.visible)
    if n_real > len(cands):
        raise ValueError(f"{n_real} real points requested but only {len(cands)} visible landmarks "
                         "(sampling with replacement is not allowed)")
    gt = gt_on_grid(sample, grid)
    idx = np.sort(rng.choice(cands, size=n_real, replace=False))
    cell = gw / sample.raster.shape[1]
    real = gt[idx] + rng.uniform(-jitter_px, jitter_px, size=(n_real, 2)) * cell
    real = np.clip(real, 0.0, np.array([gw - 1, gh - 1], dtype=float))
    rand = rng.uniform(0.0, 1.0, size=(n_points - n_real, 2)) * np.array([gw - 1, gh - 1])
    pts = [Keypoint(float(x), float(y), real_confidence) for x, y in real]
    pts += [Keypoint(float(x), float(y), random_confidence) for x, y in rand]
    return KeypointSet(sample.sample_id, pts, "synthetic_mixture")


def _rank_order(pos: np.ndarray, conf: np.ndarray) -> np.ndarray:
    # strongest first: confidence desc, then (y, x) ascending
    return np.lexsort((pos[:, 0], pos[:, 1], -conf))


def suppression_radii(pos: np.ndarray, conf: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest point that outranks it."""
    order = _rank_order(pos, conf)
    rank = np.empty(len(pos), dtype=int)
    rank[order] = np.arange(len(pos))
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    d = np.where(rank[None, :] < rank[:, None], d, np.inf)
    return d.min(axis=1)


def anms_filter(kps: KeypointSet, n_target: int) -> KeypointSet:
    """Adaptive non-maximal suppression down to ``n_target`` points.

    Output is sorted by decreasing suppression radius (ties by confidence,
    then ``(y, x)``), hence independent of input order.
    """
    if len(kps) == 0:
        raise ValueError("anms_filter needs a nonempty keypoint set")
    if len(kps) <= n_target:
        return kps
    pos, conf = kps.positions(), kps.confidences()
    radii = suppression_radii(pos, conf)
    order = np.lexsort((pos[:, 0], pos[:, 1], -conf, -radii))
    keep = order[:n_target]
    return replace(kps, points=[kps.points[i] for i in keep])


def outlier_prefilter(sets: list[KeypointSet], density_k: int = 10,
                      drop_fraction: float = 0.05) -> list[KeypointSet]:
    """Drop the corpus-wide least dense descriptors.

    A point's score is the mean distance to its ``density_k`` nearest
    descriptor neighbours over the whole corpus; the ``drop_fraction`` with
    the largest score are removed (ties: later global index goes first).
    """
    if not 0.0 <= drop_fraction <= 1.0:
        raise ValueError("drop_fraction must lie in [0, 1]")
    owners = [(si, pi) for si, s in enumerate(sets) for pi in range(len(s.points))]
    n = len(owners)
    n_drop = int(np.floor(drop_fraction * n + 0.5))
    if n_drop == 0:
        return list(sets)
    if density_k >= n:
        raise ValueError(f"density_k={density_k} needs more than {n} corpus points")
    descs = []
    for s in sets:
        for p in s.points:
            if p.descriptor is None:
                raise ValueError(f"sample {s.sample_id}: keypoint without descriptor")
            descs.append(p.descriptor)
    descs = np.asarray(descs, dtype=float)
    dist, _ = cKDTree(descs).query(descs, k=density_k + 1)
    score = dist[:, 1:].mean(axis=1)
    order = np.lexsort((-np.arange(n), -score))
    dropped = set(order[:n_drop].tolist())
    out, g = [], 0
    for s in sets:
        keep = []
        for p in s.points:
            if g not in dropped:
                keep.append(p)
            g += 1
        out.append(replace(s, points=keep))
    return out


def write_keypoint_file(path, sets: list[KeypointSet]) -> None:
    with open(path, "w") as fh:
        for s in sets:
            pts = []
            for p in s.points:
                rec = {"x": float(p.x), "y": float(p.y), "score": float(p.confidence)}
                if p.descriptor is not None:
                    rec["desc"] = [float(v) for v in p.descriptor]
                if p.cluster_label is not None:
                    rec["label"] = int(p.cluster_label)
                pts.append(rec)
            fh.write(json.dumps({"sample_id": int(s.sample_id), "points": pts}) + "\n")


def read_keypoint_file(path, grid: tuple[int, int] | None = None) -> list[KeypointSet]:
    """Parse the JSON-lines interchange format written by external detectors."""
    sets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pts = []
            for p in rec["points"]:
                desc = None
                if p.get("desc") is not None:
                    desc = np.asarray(p["desc"], dtype=float)
                    norm = np.linalg.norm(desc)
                    if norm == 0:
                        raise ValueError("zero descriptor")
                    desc = desc / norm
                label = p.get("label")
                kp = Keypoint(float(p["x"]), float(p["y"]), float(p.get("score", 1.0)), desc,
                              None if label is None else int(label))
                if grid is not None and not (0 <= kp.x <= grid[1] - 1 and 0 <= kp.y <= grid[0] - 1):
                    raise ValueError(f"point ({kp.x}, {kp.y}) outside the output grid")
                pts.append(kp)
            sets.append(KeypointSet(int(rec["sample_id"]), pts, "external_file"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return sets
