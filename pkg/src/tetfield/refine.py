"""Point-cloud refinement: passive-point recycling and importance-driven growth.

Passive points (no active neighbor) carry no optimization signal and
are recycled into voxels drawn from a multinomial over the normalized
importance field; new parameters come from barycentric interpolation in
the containing tet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import PointSet, TetGrid, active_edges, locate_many, perturb_duplicates

DEFAULT_RESOLUTION = 32
OUT_OF_HULL_RETRIES = 8


@dataclass
class VoxelImportance:
    """Voxelized importance h over the mesh bounding box, normalized to rho."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: int
    h: np.ndarray  # (r, r, r), >= 0

    @property
    def rho(self) -> np.ndarray:
        total = self.h.sum()
        if total <= 0:
            return np.zeros_like(self.h)
        return self.h / total

    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / self.resolution

    def centers(self) -> np.ndarray:
        r = self.resolution
        axes = [self.bbox_min[k] + (np.arange(r) + 0.5) * self.voxel_size()[k] for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def passive_points(grid: TetGrid, ps: PointSet) -> np.ndarray:
    """Indices of points that are neither active nor adjacent to an active point."""
    aeset = active_edges(grid, ps)
    active = np.zeros(ps.n, dtype=bool)
    active[aeset.pairs] = True
    near_active = active.copy()
    e = grid.edges
    near_active[e[:, 0]] |= active[e[:, 1]]
    near_active[e[:, 1]] |= active[e[:, 0]]
    return np.nonzero(~near_active)[0]


def _voxel_of(imp: VoxelImportance, pts: np.ndarray) -> np.ndarray:
    rel = (pts - imp.bbox_min) / np.maximum(imp.bbox_max - imp.bbox_min, 1e-300)
    idx = np.clip((rel * imp.resolution).astype(np.int64), 0, imp.resolution - 1)
    return idx


def build_importance(samples: np.ndarray, errors: np.ndarray, bbox, r: int) -> VoxelImportance:
    """Mean sample error per voxel; unoccupied voxels get zero.

    All-zero errors degrade to uniform importance over occupied voxels.
    """
    if r < 1:
        raise ValueError("resolution must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    imp = VoxelImportance(lo, hi, r, np.zeros((r, r, r)))
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        return imp
    idx = _voxel_of(imp, samples)
    flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), (r, r, r))
    sums = np.bincount(flat, weights=np.asarray(errors, dtype=np.float64), minlength=r ** 3)
    counts = np.bincount(flat, minlength=r ** 3)
    occupied = counts > 0
    h = np.zeros(r ** 3)
    h[occupied] = sums[occupied] / counts[occupied]
    if h.sum() <= 0:
        h[occupied] = 1.0
    imp.h = h.reshape(r, r, r)
    return imp


def builtin_importance(kind: str, mesh, r: int) -> VoxelImportance:
    """Closed-form importance fields: uniform (mesh-intersecting voxels only),
    axis_cubic |p_y - 1|^3, or radial ||p||^2."""
    if mesh.n_faces == 0:
        raise ValueError("importance needs a non-empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    pad = 1e-6 + 1e-6 * np.abs(hi - lo)
    imp = VoxelImportance(lo - pad, hi + pad, r, np.zeros((r, r, r)))
    if kind == "uniform":
        occ = _mesh_occupancy(imp, mesh)
        imp.h = occ.astype(np.float64)
    elif kind == "axis_cubic":
        c = imp.centers()
        imp.h = np.abs(c[..., 1] - 1.0) ** 3
    elif kind == "radial":
        c = imp.centers()
        imp.h = np.linalg.norm(c, axis=-1) ** 2
    else:
        raise ValueError(f"unknown importance kind {kind!r}")
    return imp


def _mesh_occupancy(imp: VoxelImportance, mesh, samples_per_face: int = 8) -> np.ndarray:
    """Voxels hit by a dense surface sampling (proxy for mesh intersection)."""
    from .supervise import sample_surface

    n = max(samples_per_face * mesh.n_faces, 8192)
    pts, _, _ = sample_surface(mesh, n, seed=0)
    idx = _voxel_of(imp, pts)
    occ = np.zeros((imp.resolution,) * 3, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def resample(ps: PointSet, grid: TetGrid, imp: VoxelImportance, K: int, seed: int) -> PointSet:
    """Drop passive points and add K importance-sampled, barycentric-initialized ones."""
    new_ps, _ = resample_with_map(ps, grid, imp, K, seed)
    return new_ps


def resample_with_map(ps: PointSet, grid: TetGrid, imp: VoxelImportance, K: int, seed: int):
    """Like resample, but also returns the kept original indices (pipeline
    uses them to carry optimizer state across the reindexing)."""
    if K < 0:
        raise ValueError("K must be >= 0")
    drop = passive_points(grid, ps)
    keep = np.setdiff1d(np.arange(ps.n), drop, assume_unique=True)
    rng = np.random.default_rng(np.random.SeedSequence([0x5E5A11, seed]))

    rho = imp.rho.reshape(-1)
    if K > 0 and rho.sum() > 0:
        counts = rng.multinomial(K, rho)
        voxels = np.repeat(np.arange(rho.size), counts)
        pos = _sample_in_voxels(imp, voxels, rng)
    elif K > 0:
        lo, hi = imp.bbox_min, imp.bbox_max
        pos = lo + rng.random((K, 3)) * (hi - lo)
    else:
        pos = np.zeros((0, 3))

    sdf_new, sh_new, pos = _barycentric_init(ps, grid, imp, pos, rng)

    positions = np.concatenate([ps.positions[keep], pos], axis=0)
    sdf = np.concatenate([ps.sdf[keep], sdf_new])
    sh = np.concatenate([ps.sh[keep], sh_new], axis=0)
    out = perturb_duplicates(PointSet(positions, sdf, sh, ps.degree))
    return out, keep


def _sample_in_voxels(imp: VoxelImportance, voxels: np.ndarray, rng) -> np.ndarray:
    r = imp.resolution
    ijk = np.stack(np.unravel_index(voxels, (r, r, r)), axis=1)
    return imp.bbox_min + (ijk + rng.random((voxels.size, 3))) * imp.voxel_size()


def _barycentric_init(ps: PointSet, grid: TetGrid, imp: VoxelImportance,
                      pos: np.ndarray, rng):
    """Interpolate sdf/sh at new positions; redraw or clamp hull misses."""
    m = pos.shape[0]
    if m == 0:
        return np.zeros(0), np.zeros((0, ps.sh.shape[1])), pos
    pos = pos.copy()
    tet_idx, bary, found = locate_many(grid, pos)
    for _ in range(OUT_OF_HULL_RETRIES):
        missing = np.nonzero(~found)[0]
        if missing.size == 0:
            break
        vox = _voxel_of(imp, pos[missing])
        flat = np.ravel_multi_index((vox[:, 0], vox[:, 1], vox[:, 2]), (imp.resolution,) * 3)
        pos[missing] = _sample_in_voxels(imp, flat, rng)
        t2, b2, f2 = locate_many(grid, pos[missing])
        tet_idx[missing], bary[missing], found[missing] = t2, b2, f2
    missing = np.nonzero(~found)[0]
    if missing.size:
        centroid = grid.points.mean(axis=0)
        for k in missing:
            x = pos[k]
            for _ in range(64):
                x = centroid + 0.8 * (x - centroid)
                t2, b2, f2 = locate_many(grid, x[None, :])
                if f2[0]:
                    jitter = rng.normal(size=3) * 1e-9
                    pos[k] = x + jitter
                    tet_idx[k], bary[k], found[k] = t2[0], b2[0], True
                    break
            else:
                pos[k] = centroid
                tet_idx[k], bary[k], found[k] = locate_many(grid, centroid[None, :])[0][0], \
                    locate_many(grid, centroid[None, :])[1][0], True

    w = np.clip(bary, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    corners = grid.tets[tet_idx]
    sdf_new = np.einsum("mk,mk->m", w, ps.sdf[corners])
    sh_new = np.einsum("mk,mkq->mq", w, ps.sh[corners])
    return sdf_new, sh_new, pos
