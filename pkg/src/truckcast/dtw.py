"""Dynamic time warping: exact O(nm) table and the multiresolution FastDTW approximation.

Local cost is the absolute difference of scalar values.
"""
from __future__ import annotations

import math

import numba
import numpy as np

INF = math.inf


def _check(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("DTW needs non-empty sequences")
    return x, y


def dtw_table(x, y) -> np.ndarray:
    """Full cumulative-cost table D with D[i, j] = |x_i - y_j| + min(D[i-1,j], D[i,j-1], D[i-1,j-1])."""
    x, y = _check(x, y)
    n, m = len(x), len(y)
    D = np.full((n + 1, m + 1), INF)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        xi = x[i - 1]
        for j in range(1, m + 1):
            D[i, j] = abs(xi - y[j - 1]) + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return D[1:, 1:]


def exact_dtw(x, y) -> float:
    return float(dtw_table(x, y)[-1, -1])


@numba.njit(cache=True)
def _banded_kernel(x, y, lo, hi):
    n = x.shape[0]
    m = y.shape[0]
    off = np.empty(n + 1, np.int64)
    off[0] = 0
    for i in range(n):
        off[i + 1] = off[i] + hi[i] - lo[i] + 1
    D = np.empty(off[n])

    for i in range(n):
        left = np.inf
        for j in range(lo[i], hi[i] + 1):
            if i == 0 and j == 0:
                best = 0.0
            else:
                best = left
                if i > 0:
                    if lo[i - 1] <= j <= hi[i - 1]:
                        up = D[off[i - 1] + j - lo[i - 1]]
                        if up < best:
                            best = up
                    if lo[i - 1] <= j - 1 <= hi[i - 1]:
                        dg = D[off[i - 1] + j - 1 - lo[i - 1]]
                        if dg < best:
                            best = dg
            left = abs(x[i] - y[j]) + best
            D[off[i] + j - lo[i]] = left
    cost = D[off[n - 1] + m - 1 - lo[n - 1]]

    # backtrack, preferring the diagonal on ties
    pi = np.empty(n + m, np.int64)
    pj = np.empty(n + m, np.int64)
    i, j, k = n - 1, m - 1, 0
    pi[0], pj[0] = i, j
    while i > 0 or j > 0:
        bi, bj, bv = -1, -1, np.inf
        if i > 0 and j > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:
            bv = D[off[i - 1] + j - 1 - lo[i - 1]]
            bi, bj = i - 1, j - 1
        if i > 0 and lo[i - 1] <= j <= hi[i - 1]:
            v = D[off[i - 1] + j - lo[i - 1]]
            if v < bv:
                bv, bi, bj = v, i - 1, j
        if j > 0 and lo[i] <= j - 1:
            v = D[off[i] + j - 1 - lo[i]]
            if v < bv:
                bv, bi, bj = v, i, j - 1
        i, j = bi, bj
        k += 1
        pi[k], pj[k] = i, j
    return cost, pi[:k + 1][::-1].copy(), pj[:k + 1][::-1].copy()


def _coarsen(x):
    n = len(x) - len(x) % 2
    return (x[0:n:2] + x[1:n:2]) / 2


@numba.njit(cache=True)
def _expand_window(pi, pj, n, m, radius):
    """Project a coarse path to full resolution, widened by ``radius`` coarse cells."""
    lo = np.full(n, m, np.int64)
    hi = np.full(n, -1, np.int64)
    for p in range(pi.shape[0]):
        ci, cj = pi[p], pj[p]
        for a in range(ci - radius, ci + radius + 1):
            for fi in (2 * a, 2 * a + 1):
                if 0 <= fi < n:
                    lo[fi] = min(lo[fi], 2 * (cj - radius))
                    hi[fi] = max(hi[fi], 2 * (cj + radius) + 1)
    # odd tails and clipping: rows the projection missed inherit their predecessor
    for i in range(n):
        if hi[i] < 0:
            lo[i], hi[i] = lo[i - 1], hi[i - 1]
        lo[i] = max(0, lo[i])
        hi[i] = min(m - 1, hi[i])
    lo[0] = 0
    hi[n - 1] = m - 1
    for i in range(1, n):
        # keep the band connected so a monotone path always exists
        lo[i] = min(lo[i], hi[i - 1] + 1, m - 1)
        hi[i] = max(hi[i], lo[i], lo[i - 1])
    return lo, hi


def _fast_dtw(x, y, radius):
    """Returns (cost, path rows, path cols)."""
    n, m = len(x), len(y)
    if n < radius + 2 or m < radius + 2:
        return _banded_kernel(x, y, np.zeros(n, np.int64), np.full(n, m - 1, np.int64))
    _, pi, pj = _fast_dtw(_coarsen(x), _coarsen(y), radius)
    lo, hi = _expand_window(pi, pj, n, m, radius)
    return _banded_kernel(x, y, lo, hi)


def fast_dtw(x, y, radius=1) -> float:
    """Approximate DTW cost in linear time; never below :func:`exact_dtw`."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    x, y = _check(x, y)
    return float(_fast_dtw(x, y, int(radius))[0])


def fast_dtw_path(x, y, radius=1):
    x, y = _check(x, y)
    cost, pi, pj = _fast_dtw(x, y, int(radius))
    return float(cost), list(zip(pi.tolist(), pj.tolist()))
