"""Axis-aligned BVH over triangles: batched closest-point and ray-parity queries.

Median-split over face centroids; traversal is processed node-by-node
with the per-node active query subset kept as an index array, so all
distance math stays vectorized.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_LEAF_SIZE = 8


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Row-wise closest point on triangle (a, b, c) to p (Ericson's method)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    out = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    def assign(mask, value):
        todo = mask & ~done
        out[todo] = value[todo] if value.shape == out.shape else value
        done[todo] = True

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    assign((d6 >= 0) & (d5 <= d6), c)

    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(np.abs(d1 - d3) > 0, d1 / np.where(d1 - d3 == 0, 1, d1 - d3), 0.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + np.clip(v_ab, 0, 1)[:, None] * ab)

    vb = d5 * d2 - d1 * d6
    w_ac = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1, d2 - d6), 0.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + np.clip(w_ac, 0, 1)[:, None] * ac)

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = np.where(denom_bc != 0, (d4 - d3) / np.where(denom_bc == 0, 1, denom_bc), 0.0)
    assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + np.clip(w_bc, 0, 1)[:, None] * (c - b))

    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v = vb / denom
    w = vc / denom
    assign(np.ones_like(done), a + v[:, None] * ab + w[:, None] * ac)
    return out


class TriangleBVH:
    """Static BVH over an indexed triangle set."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = _LEAF_SIZE):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.faces.shape[0] == 0:
            raise ValueError("BVH needs at least one triangle")
        tri = self.vertices[self.faces]
        self._tri_min = tri.min(axis=1)
        self._tri_max = tri.max(axis=1)
        centroids = tri.mean(axis=1)
        self._centroid_tree = cKDTree(centroids)

        order = np.arange(self.faces.shape[0], dtype=np.int64)
        node_min, node_max, node_left, node_right, node_start, node_count = [], [], [], [], [], []

        def build(lo, hi):
            idx = len(node_min)
            sel = order[lo:hi]
            node_min.append(self._tri_min[sel].min(axis=0))
            node_max.append(self._tri_max[sel].max(axis=0))
            node_left.append(-1)
            node_right.append(-1)
            node_start.append(lo)
            node_count.append(hi - lo)
            if hi - lo > leaf_size:
                cen = centroids[sel]
                axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
                mid = (lo + hi) // 2
                part = np.argsort(cen[:, axis], kind="stable")
                order[lo:hi] = sel[part]
                node_left[idx] = build(lo, mid)
                node_right[idx] = build(mid, hi)
                node_start[idx] = -1
            return idx

        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            build(0, self.faces.shape[0])
        finally:
            sys.setrecursionlimit(old)
        self._order = order
        self._min = np.array(node_min)
        self._max = np.array(node_max)
        self._left = np.array(node_left)
        self._right = np.array(node_right)
        self._start = np.array(node_start)
        self._count = np.array(node_count)

    # -- closest point --------------------------------------------------------

    def closest_point(self, queries: np.ndarray):
        """(distances, closest points, face indices) for each query row."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        m = q.shape[0]
        # prime upper bounds from the nearest face centroids
        k = min(4, self.faces.shape[0])
        _, seed_faces = self._centroid_tree.query(q, k=k)
        seed_faces = seed_faces.reshape(m, -1)
        best_d2 = np.full(m, np.inf)
        best_pt = np.zeros_like(q)
        best_face = np.zeros(m, dtype=np.int64)
        for col in range(seed_faces.shape[1]):
            self._consider(q, np.arange(m), seed_faces[:, col], best_d2, best_pt, best_face)

        stack = [(0, np.arange(m))]
        while stack:
            node, active = stack.pop()
            if active.size == 0:
                continue
            lo = self._min[node]
            hi = self._max[node]
            d = np.maximum(lo[None, :] - q[active], 0) + np.maximum(q[active] - hi[None, :], 0)
            lower2 = np.einsum("ij,ij->i", d, d)
            active = active[lower2 < best_d2[active]]
            if active.size == 0:
                continue
            if self._start[node] >= 0:
                s, n = self._start[node], self._count[node]
                for f in self._order[s:s + n]:
                    self._consider(q, active, np.full(active.size, f), best_d2, best_pt, best_face)
            else:
                stack.append((self._left[node], active))
                stack.append((self._right[node], active))
        return np.sqrt(best_d2), best_pt, best_face

    def _consider(self, q, active, face_idx, best_d2, best_pt, best_face):
        f = self.faces[face_idx]
        cp = closest_point_on_triangles(q[active], self.vertices[f[:, 0]],
                                        self.vertices[f[:, 1]], self.vertices[f[:, 2]])
        d2 = np.einsum("ij,ij->i", q[active] - cp, q[active] - cp)
        better = d2 < best_d2[active]
        upd = active[better]
        best_d2[upd] = d2[better]
        best_pt[upd] = cp[better]
        best_face[upd] = face_idx[better]

    # -- ray parity -----------------------------------------------------------

    def contains(self, queries: np.ndarray) -> np.ndarray:
        """Inside test by +x ray parity; the mesh must be watertight."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return ray_parity_inside(self.vertices, self.faces, q)


def ray_parity_inside(vertices: np.ndarray, faces: np.ndarray, points: np.ndarray,
                      max_retries: int = 6) -> np.ndarray:
    """Odd-parity inside test with deterministic retries for grazing rays."""
    tri = vertices[faces]
    m = points.shape[0]
    inside = np.zeros(m, dtype=bool)
    pending = np.arange(m)
    for attempt in range(max_retries):
        if pending.size == 0:
            break
        d = _ray_dir(attempt)
        counts, bad = _count_hits(tri, points[pending], d)
        ok = ~bad
        inside[pending[ok]] = counts[ok] % 2 == 1
        pending = pending[bad]
    # unresolved rays after retries: fall back to the last parity estimate
    if pending.size:
        d = _ray_dir(max_retries)
        counts, _ = _count_hits(tri, points[pending], d)
        inside[pending] = counts % 2 == 1
    return inside


def parity_inside_grid(vertices: np.ndarray, faces: np.ndarray, points: np.ndarray,
                       res: int = 16) -> np.ndarray:
    """Inside test by +x ray parity with a (y, z) bin prefilter.

    Equivalent to ray_parity_inside but only tests candidate faces whose
    (y, z) bounding box can meet each probe's ray; grazing cases fall
    back to the exhaustive test.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = points.shape[0]
    if faces.shape[0] == 0:
        return np.zeros(m, dtype=bool)
    tri = vertices[faces]
    pad = 1e-9 + 1e-9 * float(np.abs(vertices).max())
    ylo = tri[:, :, 1].min(axis=1) - pad
    yhi = tri[:, :, 1].max(axis=1) + pad
    zlo = tri[:, :, 2].min(axis=1) - pad
    zhi = tri[:, :, 2].max(axis=1) + pad
    y0, y1 = ylo.min(), yhi.max()
    z0, z1 = zlo.min(), zhi.max()
    dy = max((y1 - y0) / res, 1e-300)
    dz = max((z1 - z0) / res, 1e-300)

    def ybin(v):
        return np.clip(((v - y0) / dy).astype(np.int64), 0, res - 1)

    def zbin(v):
        return np.clip(((v - z0) / dz).astype(np.int64), 0, res - 1)

    iy0, iy1 = ybin(ylo), ybin(yhi)
    iz0, iz1 = zbin(zlo), zbin(zhi)
    entries_face = []
    entries_bin = []
    for oy in range(int((iy1 - iy0).max()) + 1):
        for oz in range(int((iz1 - iz0).max()) + 1):
            ok = (iy0 + oy <= iy1) & (iz0 + oz <= iz1)
            idx = np.nonzero(ok)[0]
            entries_face.append(idx)
            entries_bin.append((iy0[idx] + oy) * res + (iz0[idx] + oz))
    entries_face = np.concatenate(entries_face)
    entries_bin = np.concatenate(entries_bin)
    order = np.argsort(entries_bin, kind="stable")
    entries_face = entries_face[order]
    entries_bin = entries_bin[order]
    offsets = np.zeros(res * res + 1, dtype=np.int64)
    np.add.at(offsets, entries_bin + 1, 1)
    np.cumsum(offsets, out=offsets)

    inside = np.zeros(m, dtype=bool)
    py, pz = points[:, 1], points[:, 2]
    in_grid = (py >= y0) & (py <= y1) & (pz >= z0) & (pz <= z1)
    pbin = np.where(in_grid, ybin(py) * res + zbin(pz), -1)
    unresolved = []
    direction = _ray_dir(0)
    for b in np.unique(pbin):
        if b < 0:
            continue
        probes = np.nonzero(pbin == b)[0]
        cand = entries_face[offsets[b]:offsets[b + 1]]
        if cand.size == 0:
            continue
        counts, bad = _count_hits(tri[cand], points[probes], direction)
        inside[probes] = counts % 2 == 1
        if np.any(bad):
            unresolved.append(probes[bad])
    if unresolved:
        sub = np.concatenate(unresolved)
        inside[sub] = ray_parity_inside(vertices, faces, points[sub])
    return inside


def _ray_dir(attempt: int) -> np.ndarray:
    base = np.array([1.0, 0.0, 0.0])
    if attempt == 0:
        return base
    tilt = np.array([1.0, 0.1934 * attempt, 0.2712 * attempt])
    return tilt / np.linalg.norm(tilt)


def _count_hits(tri: np.ndarray, origins: np.ndarray, direction: np.ndarray,
                eps: float = 1e-10):
    """Moller-Trumbore hit counts per origin; flags grazing/parallel cases."""
    m = origins.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    bad = np.zeros(m, dtype=bool)
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    nrm = np.cross(e1, e2)
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    h = np.cross(direction, e2)                # (F, 3)
    det = np.einsum("ij,ij->i", e1, h)
    parallel = np.abs(det) < 1e-14
    inv_det = np.where(parallel, 0.0, 1.0 / np.where(det == 0, 1.0, det))
    chunk = max(1, int(1e6 // max(tri.shape[0], 1)))
    for s in range(0, m, chunk):
        o = origins[s:s + chunk]               # (c, 3)
        t0 = o[:, None, :] - v0[None, :, :]    # (c, F, 3)
        u = np.einsum("cfj,fj->cf", t0, h) * inv_det[None, :]
        qv = np.cross(t0, e1)                  # broadcasts to (c, F, 3)
        v = np.einsum("cfj,j->cf", qv, direction) * inv_det[None, :]
        t = np.einsum("cfj,fj->cf", qv, e2) * inv_det[None, :]
        near = (u > -eps) & (v > -eps) & (u + v < 1.0 + eps) & (t > -eps) & ~parallel[None, :]
        hit = near & (u >= eps) & (v >= eps) & (u + v <= 1.0 - eps) & (t > eps)
        grazing = near & ~hit
        # a parallel ray grazes only if the origin lies in the triangle's plane
        in_plane = parallel[None, :] & (np.abs(np.einsum("cfj,fj->cf", t0, nrm)) < eps)
        counts[s:s + chunk] = hit.sum(axis=1)
        bad[s:s + chunk] = (grazing | in_plane).any(axis=1)
    return counts, bad
