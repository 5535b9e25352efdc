"""Low-rank completion of landmark matrices by singular value thresholding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LandmarkMatrix", "svt", "svt_complete", "fill_with_means", "shrink"]


@dataclass
class LandmarkMatrix:
    """``values[k, j]`` is landmark ``k`` of image ``j`` as ``(x, y)``."""

    values: np.ndarray  # (K, N, 2)
    missing: np.ndarray  # (K, N) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape[:2] != self.missing.shape or self.values.shape[2:] != (2,):
            raise ValueError("values must be (K, N, 2) and missing (K, N)")
        if not np.all(np.isfinite(self.values[~self.missing])):
            raise ValueError("observed landmark entries must be finite")

    @property
    def shape(self):
        return self.missing.shape

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """``(2K, N)`` matrix (x rows then y rows) and its observation mask."""
        obs = ~self.missing
        vals = np.where(obs[..., None], self.values, 0.0)
        return (np.concatenate([vals[..., 0], vals[..., 1]]),
                np.concatenate([obs, obs]))


def shrink(y: np.ndarray, tau: float) -> tuple[np.ndarray, int]:
    """Singular value soft-thresholding; returns the result and its rank."""
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    return (u[:, :r] * s[:r]) @ vt[:r], r


def svt(m: np.ndarray, observed: np.ndarray, tau: float | None = None, step: float = 1.2,
        max_iters: int = 500, tol: float = 1e-7) -> np.ndarray:
    """Singular value thresholding (Cai, Candes & Shen) on a 2-D matrix.

    The iteration runs on the matrix divided by the RMS of its observed
    entries, so ``tau`` (default ``5 sqrt(n1 n2)``) is in those units and the
    result does not depend on the coordinate scale.  ``step`` is the usual
    multiple of ``n1 n2 / |observed|``.
    """
    m = np.asarray(m, dtype=float)
    obs = np.asarray(observed, dtype=bool)
    n1, n2 = m.shape
    if tau is None:
        tau = 5.0 * np.sqrt(n1 * n2)
    p_m = np.where(obs, m, 0.0)
    norm_obs = np.linalg.norm(p_m)
    if norm_obs == 0:
        return np.zeros_like(m)
    scale = norm_obs / np.sqrt(obs.sum())
    p_m = p_m / scale
    m = m / scale
    norm_obs = norm_obs / scale
    delta = step * n1 * n2 / obs.sum()
    k0 = int(np.ceil(tau / (delta * np.linalg.norm(p_m, 2))))
    y = k0 * delta * p_m
    x = np.zeros_like(m)
    for _ in range(max_iters):
        x, _ = shrink(y, tau)
        resid = np.where(obs, m - x, 0.0)
        if np.linalg.norm(resid) / norm_obs < tol:
            break
        y += delta * resid
    return x * scale


def svt_complete(matrix: LandmarkMatrix, tau: float | None = None, step: float = 1.2,
                 max_iters: int = 500) -> LandmarkMatrix:
    """Fill missing landmarks with a low-rank estimate; observed entries are kept verbatim.

    Defaults to ``tau = 5 sqrt(K N)``.
    """
    K, N = matrix.shape
    obs = ~matrix.missing
    if not obs.any(axis=1).all() or not obs.any(axis=0).all():
        raise ValueError("every landmark row and image column needs an observed entry")
    if obs.all():
        return LandmarkMatrix(matrix.values.copy(), matrix.missing.copy())
    if tau is None:
        tau = 5.0 * np.sqrt(K * N)
    stacked, mask = matrix.stacked()
    est = svt(stacked, mask, tau=tau, step=step, max_iters=max_iters)
    filled = np.stack([est[:K], est[K:]], axis=-1)
    out = np.where(obs[..., None], matrix.values, filled)
    return LandmarkMatrix(out, np.zeros_like(matrix.missing))


def fill_with_means(matrix: LandmarkMatrix, means: np.ndarray) -> LandmarkMatrix:
    """Test-time filling: missing landmark ``k`` takes ``means[k]``."""
    means = np.asarray(means, dtype=float).reshape(-1, 2)
    out = np.where(matrix.missing[..., None], means[:, None, :], matrix.values)
    return LandmarkMatrix(out, np.zeros_like(matrix.missing))
