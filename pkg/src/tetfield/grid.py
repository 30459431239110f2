"""Point cloud representation and the on-the-fly Delaunay tetrahedral grid.

The triangulation itself is delegated to Qhull (scipy.spatial.Delaunay);
tets are re-canonicalized to positive orientation with exact predicates,
so everything downstream can rely on consistent signed volumes.  All
grid queries are pure; a TetGrid is immutable after construction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay as _SciPyDelaunay
from scipy.spatial import ConvexHull, cKDTree

from . import predicates
from .errors import DegenerateInputError, PointNotFoundError, StaleGridError
from .shfield import basis_size

EPS_DUP = 1e-7          # duplicate tolerance in normalized units
EPS_BARY = 1e-9         # barycentric slack accepted by locate
INIT_SDF_MAGNITUDE = 0.1
INIT_SDF_RADIUS = 0.5   # points closer to the origin start negative

_generation_counter = itertools.count(1)


@dataclass
class PointSet:
    """Positions with per-point base signed distance and SH coefficients."""

    positions: np.ndarray   # (n, 3) float64
    sdf: np.ndarray         # (n,)  float64
    sh: np.ndarray          # (n, q) float64
    degree: int
    positions_version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        n = self.positions.shape[0]
        q = basis_size(self.degree)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (n, 3)")
        if self.sdf.shape != (n,):
            raise ValueError("sdf must have one value per point")
        if self.sh.ndim != 2 or self.sh.shape != (n, q):
            raise ValueError(f"sh must be (n, {q}) for degree {self.degree}")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.sdf))
                and np.all(np.isfinite(self.sh))):
            raise ValueError("point set contains non-finite values")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def is_negative(self) -> np.ndarray:
        """Sign partition used everywhere: sdf == 0 counts as positive."""
        return self.sdf < 0.0

    def bump_positions(self):
        """Callers must invoke this after mutating positions in place."""
        self.positions_version += 1

    def copy(self) -> "PointSet":
        return PointSet(self.positions.copy(), self.sdf.copy(), self.sh.copy(),
                        self.degree, self.positions_version)


@dataclass(frozen=True, eq=False)
class ActiveEdgeSet:
    """Edges whose endpoint signed distances have opposite signs."""

    pairs: np.ndarray        # (m, 2) int, i < j, lexicographically sorted
    first_negative: np.ndarray  # (m,) bool: True when sdf[pairs[:,0]] < 0
    positions_version: int = 0

    def __len__(self):
        return self.pairs.shape[0]


class TetGrid:
    """Delaunay tetrahedralization (P, T) with oriented tets and edge adjacency."""

    def __init__(self, points, tets, scipy_obj=None, scipy_rank=None, positions_version=0):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        self.generation = next(_generation_counter)
        self.positions_version = positions_version
        self._scipy = scipy_obj
        self._scipy_rank = scipy_rank  # scipy simplex index -> local tet index
        self._bary_cache = None
        self.edges, self._edge_tet_offsets, self._edge_tet_values = _build_edges(self.tets)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def edge_tets(self, edge_index: int) -> np.ndarray:
        """Tet indices incident to the given edge."""
        lo = self._edge_tet_offsets[edge_index]
        hi = self._edge_tet_offsets[edge_index + 1]
        return self._edge_tet_values[lo:hi]

    def tet_volumes(self) -> np.ndarray:
        p = self.points
        t = self.tets
        a = p[t[:, 1]] - p[t[:, 0]]
        b = p[t[:, 2]] - p[t[:, 0]]
        c = p[t[:, 3]] - p[t[:, 0]]
        return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0

    def point_adjacency(self):
        """(offsets, values) CSR of point -> neighboring points over grid edges."""
        e = self.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.argsort(src, kind="stable")
        src, dst = src[order], dst[order]
        offsets = np.zeros(self.n_points + 1, dtype=np.int64)
        np.add.at(offsets, src + 1, 1)
        np.cumsum(offsets, out=offsets)
        return offsets, dst


def _build_edges(tets):
    t = tets
    pairs = np.concatenate([
        t[:, [0, 1]], t[:, [0, 2]], t[:, [0, 3]],
        t[:, [1, 2]], t[:, [1, 3]], t[:, [2, 3]],
    ], axis=0)
    pairs = np.sort(pairs, axis=1)
    tet_of_pair = np.tile(np.arange(t.shape[0], dtype=np.int64), 6)
    # dedupe on lexicographic order
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    tet_of_pair = tet_of_pair[order]
    new_edge = np.ones(pairs.shape[0], dtype=bool)
    if pairs.shape[0] > 1:
        new_edge[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    edge_index = np.cumsum(new_edge) - 1
    edges = pairs[new_edge]
    n_edges = edges.shape[0]
    offsets = np.zeros(n_edges + 1, dtype=np.int64)
    np.add.at(offsets, edge_index + 1, 1)
    np.cumsum(offsets, out=offsets)
    return edges, offsets, tet_of_pair


def init_points(n: int, radius: float, seed: int, degree: int = 2) -> PointSet:
    """Uniform ball sample with the default sign initialization and zero SH."""
    if n < 4:
        raise ValueError(f"need at least 4 points, got {n}")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    positions = v * r[:, None]
    sdf = np.where(np.linalg.norm(positions, axis=1) < INIT_SDF_RADIUS,
                   -INIT_SDF_MAGNITUDE, INIT_SDF_MAGNITUDE)
    sh = np.zeros((n, basis_size(degree)))
    return perturb_duplicates(PointSet(positions, sdf, sh, degree), EPS_DUP)


def perturb_duplicates(ps: PointSet, eps: float = EPS_DUP) -> PointSet:
    """Jitter near-coincident points until all pairwise distances reach eps.

    Deterministic: the jitter stream is seeded from the round index only,
    and which points move is a function of the input, so equal inputs
    produce equal outputs.  Untouched inputs are returned as-is.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    positions = ps.positions
    moved = None
    for round_idx in range(32):
        pairs = cKDTree(positions).query_pairs(eps, output_type="ndarray")
        if pairs.size == 0:
            break
        if moved is None:
            positions = positions.copy()
            moved = True
        # displace the larger index of each close pair
        targets = np.unique(pairs[:, 1])
        rng = np.random.default_rng(np.random.SeedSequence([0x7E7F1E1D, round_idx, len(targets)]))
        dirs = rng.normal(size=(targets.size, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        scale = eps * (1.05 + 0.75 * round_idx) * (0.5 + 0.5 * rng.random(targets.size))
        positions[targets] += dirs * scale[:, None]
    else:
        raise RuntimeError("perturbation failed to separate points")
    if moved is None:
        return ps
    return PointSet(positions, ps.sdf.copy(), ps.sh.copy(), ps.degree,
                    ps.positions_version + 1)


def delaunay(ps: PointSet) -> TetGrid:
    """Delaunay tetrahedralization of the point set.

    Deterministic for a fixed input.  Raises DegenerateInputError for
    coplanar input.
    """
    p = ps.positions
    if p.shape[0] < 4:
        raise DegenerateInputError("Delaunay needs at least 4 points")
    centered = p - p.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateInputError("points are coplanar")
    try:
        tri = _SciPyDelaunay(p)
    except Exception as exc:  # Qhull failures surface as degenerate input
        raise DegenerateInputError(f"triangulation failed: {exc}") from exc

    tets = np.array(np.sort(tri.simplices, axis=1), dtype=np.int64)
    # orient positively; exact predicate resolves near-flat cases
    a, b, c, d = (p[tets[:, k]] for k in range(4))
    signs = predicates.orient3d_batch(a, b, c, d)
    flip = signs < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    order = np.lexsort((tets[:, 3], tets[:, 2], tets[:, 1], tets[:, 0]))
    tets = tets[order]
    rank = np.argsort(order)
    return TetGrid(p.copy(), tets, scipy_obj=tri, scipy_rank=rank,
                   positions_version=ps.positions_version)


def active_edges(grid: TetGrid, ps: PointSet) -> ActiveEdgeSet:
    """Edges of the grid whose endpoints carry opposite signs."""
    _check_fresh(grid, ps)
    neg = ps.is_negative()
    e = grid.edges
    mask = neg[e[:, 0]] != neg[e[:, 1]]
    pairs = e[mask]
    return ActiveEdgeSet(pairs, neg[pairs[:, 0]], ps.positions_version)


def _check_fresh(grid: TetGrid, ps: PointSet):
    if grid.n_points != ps.n or grid.positions_version != ps.positions_version:
        raise StaleGridError("grid was built from a different point configuration")


def _bary_cache(grid: TetGrid):
    if grid._bary_cache is None:
        p = grid.points
        t = grid.tets
        m = np.stack([p[t[:, 1]] - p[t[:, 0]],
                      p[t[:, 2]] - p[t[:, 0]],
                      p[t[:, 3]] - p[t[:, 0]]], axis=2)  # columns are edge vectors
        grid._bary_cache = (p[t[:, 0]], np.linalg.inv(m))
    return grid._bary_cache


def _bary_in_tet(grid: TetGrid, tet_index: int, x: np.ndarray) -> np.ndarray:
    p = grid.points
    t = grid.tets[tet_index]
    m = np.stack([p[t[1]] - p[t[0]], p[t[2]] - p[t[0]], p[t[3]] - p[t[0]]], axis=1)
    w = np.linalg.solve(m, x - p[t[0]])
    return np.array([1.0 - w.sum(), w[0], w[1], w[2]])


def locate(grid: TetGrid, x) -> tuple[int, np.ndarray]:
    """Containing tet and barycentric coordinates of a point inside the hull.

    Qhull's directed walk is tried first; a brute-force scan over all
    tets guarantees an answer for boundary points within EPS_BARY.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise ValueError("locate expects a single 3D point")
    if grid._scipy is not None:
        s = int(grid._scipy.find_simplex(x[None, :])[0])
        if s >= 0:
            idx = int(grid._scipy_rank[s])
            w = _bary_in_tet(grid, idx, x)
            if w.min() >= -EPS_BARY:
                return idx, w
    # fallback: exhaustive feasibility
    base, minv = _bary_cache(grid)
    w123 = np.einsum("tij,tj->ti", minv, x[None, :] - base)
    w0 = 1.0 - w123.sum(axis=1)
    wall = np.concatenate([w0[:, None], w123], axis=1)
    worst = wall.min(axis=1)
    best = int(np.argmax(worst))
    if worst[best] < -EPS_BARY:
        raise PointNotFoundError("point lies outside the convex hull")
    return best, wall[best]


def locate_many(grid: TetGrid, xs: np.ndarray):
    """Vectorized locate; returns (tet indices, (m,4) barycentrics, found mask)."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    m = xs.shape[0]
    idx = np.full(m, -1, dtype=np.int64)
    bary = np.zeros((m, 4))
    if grid._scipy is not None:
        s = grid._scipy.find_simplex(xs)
        hit = s >= 0
        idx[hit] = grid._scipy_rank[s[hit]]
    missing = idx < 0
    if np.any(missing):
        base, minv = _bary_cache(grid)
        for k in np.nonzero(missing)[0]:
            w123 = np.einsum("tij,tj->ti", minv, xs[k] - base)
            w0 = 1.0 - w123.sum(axis=1)
            wall = np.concatenate([w0[:, None], w123], axis=1)
            worst = wall.min(axis=1)
            best = int(np.argmax(worst))
            if worst[best] >= -EPS_BARY:
                idx[k] = best
    found = idx >= 0
    if np.any(found):
        t = grid.tets[idx[found]]
        p = grid.points
        mm = np.stack([p[t[:, 1]] - p[t[:, 0]],
                       p[t[:, 2]] - p[t[:, 0]],
                       p[t[:, 3]] - p[t[:, 0]]], axis=2)
        w = np.linalg.solve(mm, (xs[found] - p[t[:, 0]])[..., None])[..., 0]
        bary[found, 1:] = w
        bary[found, 0] = 1.0 - w.sum(axis=1)
    return idx, bary, found


def hull_volume(ps: PointSet) -> float:
    return float(ConvexHull(ps.positions).volume)
