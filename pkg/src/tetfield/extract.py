"""Marching Tetrahedra over the Delaunay grid with directional vertex placement.

Each active edge contributes exactly one mesh vertex.  Per tet, the
sign configuration selects 0, 1 or 2 triangles; winding is fixed by the
parity of the (positively oriented) tet so that face normals point from
the negative side to the positive side, and adjacent tets agree on
shared edges.  The result is watertight and 2-manifold whenever the
sign transition is interior to the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff
from .grid import ActiveEdgeSet, PointSet, TetGrid, active_edges
from .shfield import sh_project

# Even-parity vertex orders: for local vertex i, (i, a, b, c) is an even
# permutation of (0, 1, 2, 3).
_SINGLE = {
    0: (0, 1, 2, 3),
    1: (1, 0, 3, 2),
    2: (2, 0, 1, 3),
    3: (3, 0, 2, 1),
}
# For a negative pair {a, b}: (a, b, c, d) is an even permutation.
_PAIR = {
    (0, 1): (0, 1, 2, 3),
    (0, 2): (0, 2, 3, 1),
    (0, 3): (0, 3, 1, 2),
    (1, 2): (1, 2, 0, 3),
    (1, 3): (1, 3, 2, 0),
    (2, 3): (2, 3, 0, 1),
}


@dataclass(eq=False)
class SurfaceMesh:
    """Extracted triangle mesh; vertex k comes from grid edge vertex_edges[k]."""

    vertices: np.ndarray      # (v, 3) float64
    faces: np.ndarray         # (f, 3) int64, outward-oriented
    vertex_edges: np.ndarray  # (v, 2) int64 grid edge (i, j), i < j

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edge_vertex_map(self) -> dict:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.vertex_edges)}

    def face_normals(self, normalize=True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            lens = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(lens, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def euler_characteristic(self) -> int:
        if self.n_faces == 0:
            return 0
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = np.unique(e, axis=0).shape[0]
        n_verts = np.unique(self.faces).shape[0]
        return n_verts - n_edges + self.n_faces


def directional_values(ps: PointSet, pairs: np.ndarray, positions=None, sdf=None, sh=None):
    """Directional signed distances (s_hat_i, s_hat_j) per edge; Var-compatible.

    positions/sdf/sh override the plain arrays when tracing gradients.
    """
    p = positions if positions is not None else ps.positions
    s = sdf if sdf is not None else ps.sdf
    c = sh if sh is not None else ps.sh
    i = pairs[:, 0]
    j = pairs[:, 1]
    pi = diff.gather(p, i)
    pj = diff.gather(p, j)
    d = pj - pi
    inv_len = 1.0 / diff.norm_rows(d, eps=1e-300)
    nx = diff.col(d, 0) * inv_len
    ny = diff.col(d, 1) * inv_len
    nz = diff.col(d, 2) * inv_len
    ci = diff.gather(c, i)
    cj = diff.gather(c, j)
    ui = sh_project(ps.degree, ci, nx, ny, nz)
    uj = sh_project(ps.degree, cj, -nx, -ny, -nz)
    si = diff.gather(s, i)
    sj = diff.gather(s, j)
    shat_i = (1.0 + diff.tanh(ui)) * _as_col(si)
    shat_j = (1.0 + diff.tanh(uj)) * _as_col(sj)
    return shat_i, shat_j, pi, pj


def _as_col(x):
    if isinstance(x, diff.Var):
        return diff.Var(x.value.reshape(-1, 1), ((x, lambda g: g.reshape(x.value.shape)),), "ascol")
    return np.asarray(x).reshape(-1, 1)


def edge_vertices(ps: PointSet, pairs: np.ndarray, positions=None, sdf=None, sh=None):
    """Mesh vertex per active edge via the directional crossing formula."""
    shat_i, shat_j, pi, pj = directional_values(ps, pairs, positions, sdf, sh)
    return (shat_j * pi - shat_i * pj) / (shat_j - shat_i)


def edge_vertex(e, ps: PointSet) -> np.ndarray:
    """Single-edge convenience wrapper."""
    pairs = np.asarray(e, dtype=np.int64).reshape(1, 2)
    return np.asarray(edge_vertices(ps, pairs))[0]


_SINGLE_TABLE = np.array([_SINGLE[i] for i in range(4)], dtype=np.int64)
_PAIR_TABLE = np.zeros((16, 4), dtype=np.int64)
for (_a, _b), _perm in _PAIR.items():
    _PAIR_TABLE[_a * 4 + _b] = _perm


def mt_topology(tets: np.ndarray, negative: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Faces as triples of active-edge indices (rows of `pairs`).

    Pure combinatorics shared by the plain and traced extraction paths;
    fully vectorized so large grids stay cheap.
    """
    if pairs.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    width = np.int64(pairs.max()) + 1
    keys = pairs[:, 0] * width + pairs[:, 1]  # lexsorted pairs -> ascending keys

    def rank(gi, gj):
        lo = np.minimum(gi, gj)
        hi = np.maximum(gi, gj)
        return np.searchsorted(keys, lo * width + hi)

    neg = negative[tets]                      # (T, 4) bool
    counts = neg.sum(axis=1)

    chunks = []   # (tet index, local ordinal, face rows)

    one = np.nonzero(counts == 1)[0]
    if one.size:
        perms = _SINGLE_TABLE[np.argmax(neg[one], axis=1)]
        g = tets[one[:, None], perms]          # (m, 4) globals (i, a, b, c)
        f = np.stack([rank(g[:, 0], g[:, 1]),
                      rank(g[:, 0], g[:, 2]),
                      rank(g[:, 0], g[:, 3])], axis=1)
        chunks.append((one, np.zeros(one.size, dtype=np.int64), f))

    three = np.nonzero(counts == 3)[0]
    if three.size:
        perms = _SINGLE_TABLE[np.argmin(neg[three], axis=1)]  # single positive vertex
        g = tets[three[:, None], perms]
        f = np.stack([rank(g[:, 0], g[:, 1]),
                      rank(g[:, 0], g[:, 3]),
                      rank(g[:, 0], g[:, 2])], axis=1)
        chunks.append((three, np.zeros(three.size, dtype=np.int64), f))

    two = np.nonzero(counts == 2)[0]
    if two.size:
        rows, cols = np.nonzero(neg[two])
        na, nb = cols[0::2], cols[1::2]        # na < nb by nonzero order
        perms = _PAIR_TABLE[na * 4 + nb]
        g = tets[two[:, None], perms]          # (m, 4) globals (a, b, c, d)
        q0 = rank(g[:, 0], g[:, 2])
        q1 = rank(g[:, 0], g[:, 3])
        q2 = rank(g[:, 1], g[:, 3])
        q3 = rank(g[:, 1], g[:, 2])
        # split along the diagonal through the lexicographically smallest
        # generating edge; both fans follow the quad's cyclic orientation
        diag_a = np.minimum(keys[q0], keys[q2]) <= np.minimum(keys[q1], keys[q3])
        fa = np.where(diag_a[:, None],
                      np.stack([q0, q1, q2], axis=1),
                      np.stack([q1, q2, q3], axis=1))
        fb = np.where(diag_a[:, None],
                      np.stack([q0, q2, q3], axis=1),
                      np.stack([q1, q3, q0], axis=1))
        chunks.append((two, np.zeros(two.size, dtype=np.int64), fa))
        chunks.append((two, np.ones(two.size, dtype=np.int64), fb))

    if not chunks:
        return np.zeros((0, 3), dtype=np.int64)
    tet_ids = np.concatenate([c[0] for c in chunks])
    ordinals = np.concatenate([c[1] for c in chunks])
    faces = np.concatenate([c[2] for c in chunks], axis=0)
    order = np.lexsort((ordinals, tet_ids))
    return faces[order]


def marching_tets(grid: TetGrid, ps: PointSet, aeset: ActiveEdgeSet | None = None) -> SurfaceMesh:
    """Extract the isosurface mesh; one vertex per active edge."""
    if aeset is None:
        aeset = active_edges(grid, ps)
    pairs = aeset.pairs
    if len(aeset) == 0:
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                           np.zeros((0, 2), dtype=np.int64))
    vertices = np.asarray(edge_vertices(ps, pairs))
    faces = mt_topology(grid.tets, ps.is_negative(), pairs)
    return SurfaceMesh(vertices, faces, pairs.copy())


def largest_component(mesh: SurfaceMesh) -> SurfaceMesh:
    """Keep the face-connected component with the most faces.

    Ties go to the component containing the smallest vertex index.
    """
    if mesh.n_faces == 0:
        return mesh
    labels = _face_components(mesh.faces)
    n_comp = labels.max() + 1
    sizes = np.bincount(labels, minlength=n_comp)
    best = np.nonzero(sizes == sizes.max())[0]
    if best.size > 1:
        min_vertex = np.full(n_comp, np.iinfo(np.int64).max)
        np.minimum.at(min_vertex, labels, mesh.faces.min(axis=1))
        best = best[np.argmin(min_vertex[best])]
    else:
        best = best[0]
    keep = labels == best
    return _subset_faces(mesh, keep)


def _subset_faces(mesh: SurfaceMesh, keep: np.ndarray) -> SurfaceMesh:
    faces = mesh.faces[keep]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return SurfaceMesh(mesh.vertices[used], remap[faces], mesh.vertex_edges[used])


def _face_components(faces: np.ndarray) -> np.ndarray:
    """Union-find over faces sharing an edge."""
    f = faces.shape[0]
    parent = np.arange(f, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(f, dtype=np.int64), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    for k in np.nonzero(same)[0]:
        ra, rb = find(owner[k]), find(owner[k + 1])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(x) for x in range(f)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


# -- mesh diagnostics ---------------------------------------------------------

def boundary_edge_count(mesh: SurfaceMesh) -> int:
    if mesh.n_faces == 0:
        return 0
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int(np.sum(counts == 1))


def is_two_manifold(mesh: SurfaceMesh) -> bool:
    """Every edge has exactly two incident faces and every vertex fan closes."""
    if mesh.n_faces == 0:
        return True
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts != 2):
        return False
    return _single_fans(mesh.faces)


def _single_fans(faces: np.ndarray) -> bool:
    """The link of every vertex must form a single closed cycle.

    Faces are consistently oriented, so at vertex a the face (a, b, c)
    contributes the directed link arc b -> c; a single fan means those
    arcs chain into exactly one cycle.
    """
    from collections import defaultdict

    link = defaultdict(list)
    for a, b, c in faces:
        link[int(a)].append((int(b), int(c)))
        link[int(b)].append((int(c), int(a)))
        link[int(c)].append((int(a), int(b)))
    for arcs in link.values():
        succ = {}
        for s, t in arcs:
            if s in succ:
                return False
            succ[s] = t
        start = arcs[0][0]
        cur = succ.get(start)
        steps = 1
        while cur != start:
            cur = succ.get(cur)
            if cur is None or steps > len(arcs):
                return False
            steps += 1
        if steps != len(arcs):
            return False
    return True
