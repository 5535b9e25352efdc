"""Optimal linear assignment (Hungarian / shortest augmenting path)."""
from __future__ import annotations

import numpy as np

__all__ = ["hungarian", "pad_square", "assignment_cost"]


def _solve(a: np.ndarray):
    """Kuhn-Munkres with row/column potentials on a square matrix.

    Returns ``(row_to_col, u, v)`` with ``a[i, j] - u[i] - v[j] >= 0`` and
    equality on the matched edges.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic(tight: list[list[int]], match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph."""
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=int)
    owner[match] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)

    for r in range(n):
        for c in tight[r]:
            if c == match[r]:
                break
            r2 = owner[c]
            if fixed[r2]:
                continue
            target = match[r]
            # r takes c; r2 must reach r's old column along tight alternating edges
            seen = {c}
            path = {}

            def dfs(row):
                for c2 in tight[row]:
                    if c2 in seen:
                        continue
                    seen.add(c2)
                    if c2 == target:
                        path[row] = c2
                        return True
                    nxt = owner[c2]
                    if fixed[nxt] or nxt == r:
                        continue
                    if dfs(nxt):
                        path[row] = c2
                        return True
                return False

            if dfs(r2):
                match[r] = c
                owner[c] = r
                for row, col in path.items():
                    match[row] = col
                    owner[col] = row
                break
        fixed[r] = True
    return match


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment of an ``n x n`` matrix.

    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``.  Among
    optimal assignments the lexicographically smallest ``perm`` is returned
    (optimality of ties judged with a relative tolerance of 1e-12).
    """
    a = np.asarray(cost, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cost must be square, got shape {a.shape}; pad rectangular inputs")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix has non-finite entries")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    match, u, v = _solve(a)
    reduced = a - u[:, None] - v[None, :]
    tol = 1e-12 * max(1.0, float(np.abs(a).max())) * n
    tight = [np.flatnonzero(reduced[i] <= tol).tolist() for i in range(n)]
    return _lexicographic(tight, match)


def pad_square(cost, fill: float = 0.0) -> np.ndarray:
    a = np.asarray(cost, dtype=float)
    n = max(a.shape)
    out = np.full((n, n), fill)
    out[: a.shape[0], : a.shape[1]] = a
    return out


def assignment_cost(cost, perm) -> float:
    a = np.asarray(cost, dtype=float)
    return float(a[np.arange(len(perm)), perm].sum())
