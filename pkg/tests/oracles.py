"""Slow, obviously-correct reference implementations used by the tests."""
import math
from fractions import Fraction

import numpy as np


def otsu_brute(values, bins=256):
    """Between-class variance evaluated directly at every bin's lower edge.

    Returns (threshold, variance). The first (lowest) edge wins ties.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    lo, hi = float(v[0]), float(v[-1])
    edges = lo + np.arange(bins + 1) * ((hi - lo) / bins)
    # bin b holds values with edges[b] <= x < edges[b+1]; the top edge folds into the last bin
    bin_of = [min(bins - 1, int(np.searchsorted(edges, x, side="right")) - 1) for x in v]
    n = len(v)
    best, best_t = -1.0, None
    for k in range(bins):
        lower = [x for x, b in zip(v, bin_of) if b < k]
        upper = [x for x, b in zip(v, bin_of) if b >= k]
        if not lower or not upper:
            score = 0.0
        else:
            m0 = math.fsum(lower) / len(lower)
            m1 = math.fsum(upper) / len(upper)
            score = len(lower) * len(upper) * (m0 - m1) ** 2 / (n * n)
        if score > best:
            best, best_t = score, float(edges[k])
    return best_t, best


def percentile_nearest_rank(values, p):
    vals = sorted(values)
    if not vals:
        return None
    rank = max(1, math.ceil(Fraction(repr(float(p))) * len(vals) / 100))
    return vals[rank - 1]


def local_maxima_scan(values, window):
    h, w = values.shape
    r = window // 2
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            block = values[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
            out[i, j] = values[i, j] >= block.max()
    return out


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def components_union_find(mask):
    """Sets of (row, col) pixels per 8-connected component."""
    h, w = mask.shape
    uf = UnionFind(h * w)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w and mask[a, b]:
                        uf.union(i * w + j, a * w + b)
    groups = {}
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                groups.setdefault(uf.find(i * w + j), set()).add((i, j))
    # order by the bounding box's top-left corner, then the first pixel in raster order
    return sorted(groups.values(), key=lambda g: (min(r for r, _ in g), min(c for _, c in g), min(g)))


def dilate_square(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i, j in zip(*np.nonzero(mask)):
        out[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1] = True
    return out


def erode_square(mask, r):
    """Pixel survives when every in-image pixel of its window is set."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            out[i, j] = mask[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].all()
    return out


def closing_oracle(mask, r):
    return erode_square(dilate_square(mask, r), r)


def knn_brute(points, k, dist):
    """points: list of (id, obj); returns {i: [j, ...]} by (distance, id)."""
    out = {}
    for i, (id_i, a) in enumerate(points):
        cands = sorted(((dist(a, b), id_j, j) for j, (id_j, b) in enumerate(points) if j != i))
        out[i] = [j for _, _, j in cands[:k]]
    return out
