"""kd-tree over photons with phase-selective K-nearest-neighbour queries.

One tree holds every phase; each node keeps a bitmask of the phase tags
below it so subtrees without the queried tag are skipped.  Results are exact
and ordered by ``(distance, photon id)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .photons import Photons

LEAF_SIZE = 8
_STACK = 128


@nb.njit(inline="always", cache=True)
def _less(pts, axis, a, b):
    va = pts[a, axis]
    vb = pts[b, axis]
    return va < vb or (va == vb and a < b)


@nb.njit(cache=True)
def _select(perm, lo, hi, k, pts, axis):
    """Reorder ``perm[lo:hi]`` so position ``k`` holds the k-th smallest key."""
    hi -= 1
    while hi > lo:
        mid = (lo + hi) // 2
        if mid > lo:
            # median of three moved to perm[hi] as pivot
            a, b, c = perm[lo], perm[mid], perm[hi]
            if _less(pts, axis, b, a):
                a, b = b, a
            if _less(pts, axis, c, b):
                b, c = c, b
                if _less(pts, axis, b, a):
                    a, b = b, a
            perm[lo] = a
            perm[mid] = c
            perm[hi] = b
        pivot = perm[hi]
        store = lo
        for i in range(lo, hi):
            if _less(pts, axis, perm[i], pivot):
                perm[store], perm[i] = perm[i], perm[store]
                store += 1
        perm[store], perm[hi] = perm[hi], perm[store]
        if store == k:
            return
        if k < store:
            hi = store - 1
        else:
            lo = store + 1


@nb.njit(cache=True)
def _build(pts, tags, leaf_size):
    n = pts.shape[0]
    perm = np.arange(n)
    # leaves hold at least (leaf_size + 1) // 2 points
    cap = 4 * n // (leaf_size + 1) + 3
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    bmin = np.zeros((cap, 3))
    bmax = np.zeros((cap, 3))
    mask = np.zeros(cap, np.uint64)
    stack = np.empty(cap, np.int64)
    node_count = 1
    start[0] = 0
    end[0] = n
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        m = np.uint64(0)
        for a in range(3):
            bmin[node, a] = np.inf
            bmax[node, a] = -np.inf
        for i in range(s, e):
            p = perm[i]
            for a in range(3):
                v = pts[p, a]
                if v < bmin[node, a]:
                    bmin[node, a] = v
                if v > bmax[node, a]:
                    bmax[node, a] = v
            if tags[p] < 64:
                m |= np.uint64(1) << np.uint64(tags[p])
            else:
                m = ~np.uint64(0)
        mask[node] = m
        if e - s <= leaf_size:
            continue
        axis = 0
        ext = bmax[node, 0] - bmin[node, 0]
        for a in range(1, 3):
            if bmax[node, a] - bmin[node, a] > ext:
                ext = bmax[node, a] - bmin[node, a]
                axis = a
        mid = (s + e) // 2
        _select(perm, s, e, mid, pts, axis)
        l = node_count
        r = node_count + 1
        node_count += 2
        left[node] = l
        right[node] = r
        start[l] = s
        end[l] = mid
        start[r] = mid
        end[r] = e
        stack[sp] = r
        stack[sp + 1] = l
        sp += 2
    return (perm, left[:node_count].copy(), right[:node_count].copy(), start[:node_count].copy(),
            end[:node_count].copy(), bmin[:node_count].copy(), bmax[:node_count].copy(), mask[:node_count].copy())


@nb.njit(inline="always", cache=True)
def _box_d2(bmin, bmax, node, x, y, z):
    d2 = 0.0
    q = (x, y, z)
    for a in range(3):
        v = q[a]
        if v < bmin[node, a]:
            t = bmin[node, a] - v
            d2 += t * t
        elif v > bmax[node, a]:
            t = v - bmax[node, a]
            d2 += t * t
    return d2


@nb.njit(inline="always", cache=True)
def _gt(d_a, i_a, d_b, i_b):
    return d_a > d_b or (d_a == d_b and i_a > i_b)


@nb.njit(cache=True)
def _sift_down(hd, hi, n, j):
    while True:
        c = 2 * j + 1
        if c >= n:
            return
        if c + 1 < n and _gt(hd[c + 1], hi[c + 1], hd[c], hi[c]):
            c += 1
        if _gt(hd[c], hi[c], hd[j], hi[j]):
            hd[c], hd[j] = hd[j], hd[c]
            hi[c], hi[j] = hi[j], hi[c]
            j = c
        else:
            return


@nb.njit(cache=True)
def knn_nb(left, right, start, end, bmin, bmax, mask, spts, stags, sids,
           x, y, z, tag, k, r2max, out_id, out_d2, stack):
    """Fill ``out_id``/``out_d2`` ascending; returns (count, visited nodes)."""
    n = 0
    visited = 0
    if start.shape[0] == 0 or k <= 0 or tag < 0:
        return 0, 0
    bit = np.uint64(1) << np.uint64(tag) if tag < 64 else ~np.uint64(0)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        bound = out_d2[0] if n == k else r2max
        if _box_d2(bmin, bmax, node, x, y, z) > bound or (mask[node] & bit) == 0:
            continue
        visited += 1
        l = left[node]
        if l < 0:
            for i in range(start[node], end[node]):
                if stags[i] != tag:
                    continue
                dx = spts[i, 0] - x
                dy = spts[i, 1] - y
                dz = spts[i, 2] - z
                d2 = dx * dx + dy * dy + dz * dz
                pid = sids[i]
                if n < k:
                    if d2 <= r2max:
                        # sift up
                        j = n
                        out_d2[j] = d2
                        out_id[j] = pid
                        n += 1
                        while j > 0:
                            p = (j - 1) // 2
                            if _gt(out_d2[j], out_id[j], out_d2[p], out_id[p]):
                                out_d2[j], out_d2[p] = out_d2[p], out_d2[j]
                                out_id[j], out_id[p] = out_id[p], out_id[j]
                                j = p
                            else:
                                break
                elif _gt(out_d2[0], out_id[0], d2, pid):
                    out_d2[0] = d2
                    out_id[0] = pid
                    _sift_down(out_d2, out_id, n, 0)
            continue
        r = right[node]
        dl = _box_d2(bmin, bmax, l, x, y, z)
        dr = _box_d2(bmin, bmax, r, x, y, z)
        if dl <= dr:
            stack[sp] = r
            stack[sp + 1] = l
        else:
            stack[sp] = l
            stack[sp + 1] = r
        sp += 2
    # heap -> ascending
    m = n
    while m > 1:
        m -= 1
        out_d2[0], out_d2[m] = out_d2[m], out_d2[0]
        out_id[0], out_id[m] = out_id[m], out_id[0]
        _sift_down(out_d2, out_id, m, 0)
    return n, visited


@nb.njit(parallel=True, cache=True)
def _knn_batch(left, right, start, end, bmin, bmax, mask, spts, stags, sids,
               q, qtag, k, r2max, out_id, out_d2, counts, visited):
    for i in nb.prange(q.shape[0]):
        stack = np.empty(_STACK, np.int64)
        c, v = knn_nb(left, right, start, end, bmin, bmax, mask, spts, stags, sids,
                      q[i, 0], q[i, 1], q[i, 2], qtag[i], k, r2max[i], out_id[i], out_d2[i], stack)
        counts[i] = c
        visited[i] = v


@dataclass(frozen=True)
class KnnQuery:
    x: tuple[float, float, float]
    g: float
    K: int = 1024
    r_max: float = math.inf

    def __post_init__(self):
        if self.K < 1 or not self.r_max > 0:
            raise ValueError("KnnQuery needs K >= 1 and r_max > 0")


@dataclass(frozen=True)
class KnnResult:
    ids: np.ndarray  # (Q, K) int64, -1 padded
    dist: np.ndarray  # (Q, K) float64, inf padded
    counts: np.ndarray  # (Q,)
    visited: np.ndarray  # (Q,) nodes visited


class PhotonMap:
    """Immutable kd-tree over a :class:`Photons` array."""

    def __init__(self, photons: Photons, leaf_size=LEAF_SIZE):
        self.photons = photons
        self.phase_set = tuple(photons.phase_set)
        pts = np.ascontiguousarray(photons.positions, dtype=np.float64)
        tags = np.ascontiguousarray(photons.g_index, dtype=np.int64)
        (perm, self.left, self.right, self.start, self.end,
         self.bmin, self.bmax, self.mask) = _build(pts, tags, leaf_size)
        if len(photons) == 0:
            z = np.zeros(0, np.int64)
            self.left = self.right = self.start = self.end = z
            self.bmin = self.bmax = np.zeros((0, 3))
            self.mask = np.zeros(0, np.uint64)
        self.order = perm
        self.spts = np.ascontiguousarray(pts[perm])
        self.stags = np.ascontiguousarray(tags[perm])
        self.sids = perm.astype(np.int64)

    def __len__(self):
        return len(self.photons)

    @property
    def n_nodes(self):
        return self.start.shape[0]

    def tag_of(self, g):
        """Index of ``g`` in the phase set (exact match) or -1."""
        for k, v in enumerate(self.phase_set):
            if v == float(g):
                return k
        return -1

    def inorder_ids(self):
        """Photon ids in left-to-right leaf order."""
        out = []
        if self.n_nodes == 0:
            return np.zeros(0, np.int64)
        stack = [0]
        while stack:
            node = stack.pop()
            if self.left[node] < 0:
                out.append(self.sids[self.start[node]:self.end[node]])
            else:
                stack.append(self.right[node])
                stack.append(self.left[node])
        return np.concatenate(out)

    def query_batch(self, x, g, K, r_max=math.inf):
        """Batched phase-selective KNN; ``g`` is a scalar or per-query array."""
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        nq = x.shape[0]
        garr = np.broadcast_to(np.asarray(g, dtype=np.float64), (nq,))
        tags = np.full(nq, -1, np.int64)
        for k, v in enumerate(self.phase_set):
            tags[garr == v] = k
        r = np.broadcast_to(np.asarray(r_max, dtype=np.float64), (nq,))
        r2 = np.ascontiguousarray(r * r)
        K = int(K)
        ids = np.full((nq, K), -1, np.int64)
        d2 = np.full((nq, K), np.inf)
        counts = np.zeros(nq, np.int64)
        visited = np.zeros(nq, np.int64)
        if nq and self.n_nodes:
            _knn_batch(self.left, self.right, self.start, self.end, self.bmin, self.bmax, self.mask,
                       self.spts, self.stags, self.sids, x, tags, K, r2, ids, d2, counts, visited)
        return KnnResult(ids, np.sqrt(d2), counts, visited)

    def knn_phase(self, q: KnnQuery):
        """List of ``(photon id, distance)`` ascending by distance, ties by id."""
        res = self.query_batch(np.asarray(q.x)[None], q.g, q.K, q.r_max)
        c = int(res.counts[0])
        return [(int(i), float(d)) for i, d in zip(res.ids[0, :c], res.dist[0, :c])]


def build(photons: Photons) -> PhotonMap:
    return PhotonMap(photons)


def knn_phase(pmap: PhotonMap, q: KnnQuery):
    return pmap.knn_phase(q)
