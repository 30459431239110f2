"""Grid and mesh quality regularizers.

Three energies: the optimal-Delaunay tet energy (difference between the
circumsphere-shell moment and the tet's principal-moment sum), a
triangle fairness penalty on deviations from 60-degree angles, and a
cross-entropy suppression of signed-distance sign changes.  Every loss
also runs traced (Var inputs) so gradients flow to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff
from .diff import absolute, arccos, clip_min, col, cross, gather, norm_rows, rows_dot, softplus, vsum
from .errors import DegenerateInputError
from .grid import ActiveEdgeSet, PointSet, TetGrid

EPS_VOL = 1e-12          # |det| floor for an invertible tet in the scalar ops
_EPS_VOL_LOSS = 1e-300   # loss path masks only true zero-volume tets
_ANGLE_CLAMP = 1e-12
DEGENERATE_PENALTY_FACTOR = 1e3


@dataclass(frozen=True)
class TetMoments:
    """Volume, circumsphere and second-moment summary of one tetrahedron."""

    volume: float
    circumcenter: np.ndarray
    circumradius: float
    quad_sums: np.ndarray    # (S_x, S_y, S_z) about the circumcenter
    shell_moment: float      # (2/5) V R^2
    principal_moment_sum: float  # (1/5) V (S_x + S_y + S_z)


def _odt_core(v0, v1, v2, v3):
    """Batched circumcenter/moment pieces; Var-compatible rows (m, 3)."""
    a = v1 - v0
    b = v2 - v0
    c = v3 - v0
    bc = cross(b, c)
    det = rows_dot(a, bc)                      # 6 * signed volume
    vol = absolute(det) * (1.0 / 6.0)
    num = rows_dot(a, a) * bc + rows_dot(b, b) * cross(c, a) + rows_dot(c, c) * cross(a, b)
    center = v0 + num / (det * 2.0)
    r2 = rows_dot(center - v0, center - v0)
    m_shell = vol * r2 * (2.0 / 5.0)

    def quad_sum(k):
        x0 = col(v0, k) - col(center, k)
        x1 = col(v1, k) - col(center, k)
        x2 = col(v2, k) - col(center, k)
        x3 = col(v3, k) - col(center, k)
        sq = x0 * x0 + x1 * x1 + x2 * x2 + x3 * x3
        tot = x0 + x1 + x2 + x3
        # sum_i x_i^2 + sum_{i<j} x_i x_j == (sum x_i^2 + (sum x_i)^2) / 2
        return (sq + tot * tot) * 0.5

    s = quad_sum(0) + quad_sum(1) + quad_sum(2)
    m_tet = vol * s * (1.0 / 5.0)
    return det, vol, center, r2, m_shell, m_tet


def circumsphere(tet_points) -> tuple[np.ndarray, float]:
    """Circumcenter and circumradius of a single tetrahedron."""
    v = np.asarray(tet_points, dtype=np.float64).reshape(4, 3)
    det, vol, center, r2, _, _ = _odt_core(v[0:1], v[1:2], v[2:3], v[3:4])
    if abs(float(det)) < EPS_VOL:
        raise DegenerateInputError("tetrahedron is (near) flat; no circumsphere")
    return np.asarray(center)[0], float(np.sqrt(r2))


def tet_moments(tet_points) -> TetMoments:
    v = np.asarray(tet_points, dtype=np.float64).reshape(4, 3)
    det, vol, center, r2, m_shell, m_tet = _odt_core(v[0:1], v[1:2], v[2:3], v[3:4])
    if abs(float(det)) < EPS_VOL:
        raise DegenerateInputError("tetrahedron is (near) flat")
    c = np.asarray(center)[0]
    rel = v - c
    quad = 0.5 * ((rel ** 2).sum(axis=0) + rel.sum(axis=0) ** 2)
    return TetMoments(float(vol), c, float(np.sqrt(r2)), quad,
                      float(m_shell), float(m_tet))


def odt_energy(tet_points) -> float:
    """|shell moment - principal moment sum|; zero exactly on regular tets."""
    m = tet_moments(tet_points)
    return abs(m.shell_moment - m.principal_moment_sum)


def odt_loss_rows(v0, v1, v2, v3, degenerate_penalty=None):
    """Sum of per-tet ODT energies over batched rows; Var-compatible.

    Zero-volume tets contribute a constant penalty instead of a gradient.
    """
    det, vol, center, r2, m_shell, m_tet = _odt_core(v0, v1, v2, v3)
    energy = absolute(m_shell - m_tet)
    det_val = np.abs(diff.constant(det)).reshape(-1)
    ok = det_val > _EPS_VOL_LOSS
    if np.all(ok):
        return vsum(energy)
    if degenerate_penalty is None:
        vals = np.asarray(diff.constant(energy)).reshape(-1)
        med = float(np.median(vals[ok])) if np.any(ok) else 1.0
        degenerate_penalty = DEGENERATE_PENALTY_FACTOR * med
    masked = diff.where_mask(ok.reshape(-1, 1), energy)
    return vsum(masked) + float((~ok).sum()) * degenerate_penalty


def odt_loss(grid: TetGrid, ps: PointSet, positions=None, active_only=False,
             aeset: ActiveEdgeSet | None = None):
    """ODT energy summed over the grid's tets (optionally only active-point tets)."""
    p = positions if positions is not None else grid.points
    tets = grid.tets
    if active_only:
        if aeset is None:
            from .grid import active_edges
            aeset = active_edges(grid, ps)
        touched = np.zeros(grid.n_points, dtype=bool)
        touched[aeset.pairs] = True
        tets = tets[np.any(touched[tets], axis=1)]
        if tets.shape[0] == 0:
            return 0.0 if not isinstance(p, diff.Var) else diff.Var(0.0)
    v0, v1, v2, v3 = (gather(p, tets[:, k]) for k in range(4))
    return odt_loss_rows(v0, v1, v2, v3)


def triangle_angles_rows(a, b, c):
    """Internal angles at (a, b, c) corners for batched rows; Var-compatible."""
    def angle(p, q, r):
        u = q - p
        v = r - p
        cosang = rows_dot(u, v) / (norm_rows(u, eps=1e-300) * norm_rows(v, eps=1e-300))
        cosang = clip_min(cosang, -1.0 + _ANGLE_CLAMP)
        cosang = -clip_min(-cosang, -1.0 + _ANGLE_CLAMP)  # clamp above at 1 - eps
        return arccos(cosang)

    return angle(a, b, c), angle(b, c, a), angle(c, a, b)


def fairness_loss(mesh_or_vertices, faces=None):
    """Mean-squared angle deviation from 60 degrees, summed over faces.

    Accepts a SurfaceMesh or (vertices, faces); vertices may be a Var.
    """
    if faces is None:
        vertices, faces = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        vertices = mesh_or_vertices
    if faces.shape[0] == 0:
        return 0.0 if not isinstance(vertices, diff.Var) else diff.Var(0.0)
    a = gather(vertices, faces[:, 0])
    b = gather(vertices, faces[:, 1])
    c = gather(vertices, faces[:, 2])
    ta, tb, tc = triangle_angles_rows(a, b, c)
    third = np.pi / 3.0
    dev = (ta - third) ** 2 + (tb - third) ** 2 + (tc - third) ** 2
    return vsum(dev) * (1.0 / 3.0)


def sign_loss(ps_or_sdf, aeset: ActiveEdgeSet):
    """Cross-entropy penalty on sign changes, summed over both orientations.

    The target of a directed edge (a, b) is the sign of s_b (zero counts
    as positive); the prediction is sigmoid(s_a).
    """
    sdf = ps_or_sdf.sdf if isinstance(ps_or_sdf, PointSet) else ps_or_sdf
    pairs = aeset.pairs
    if pairs.shape[0] == 0:
        return 0.0 if not isinstance(sdf, diff.Var) else diff.Var(0.0)
    s_i = gather(sdf, pairs[:, 0])
    s_j = gather(sdf, pairs[:, 1])
    sdf_plain = diff.constant(sdf)
    y_i = (sdf_plain[pairs[:, 0]] >= 0.0).astype(np.float64)  # target when b = i
    y_j = (sdf_plain[pairs[:, 1]] >= 0.0).astype(np.float64)  # target when b = j
    # H(sigmoid(s_a), y) == softplus((1 - 2y) * s_a)
    term_ij = softplus(s_i * (1.0 - 2.0 * y_j))
    term_ji = softplus(s_j * (1.0 - 2.0 * y_i))
    return vsum(term_ij) + vsum(term_ji)
