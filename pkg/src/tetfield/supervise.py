"""Geometric supervision: target shapes, surface sampling and the
three-term reconstruction loss (distance-to-target, normal alignment,
and an interior-occupancy guard against collapse).

Targets are either analytic signed distance fields (sphere / box /
torus / unions, with exact gradients) or triangle meshes backed by a
BVH for closest-point and parity queries.  Target queries inside the
recorded loss are treated as locally constant except the distance term,
whose spatial gradient is supplied analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from . import diff
from .bvh import TriangleBVH, parity_inside_grid, ray_parity_inside
from .diff import Var, gather, norm_rows, rows_dot, vmean, vsum

OCCUPANCY_PROBES = 512
EDGE_ERROR_WEIGHT = 0.1  # beta in the per-sample error


# -- targets ------------------------------------------------------------------

class TargetShape:
    """Signed distance oracle: negative inside, unit outward gradient."""

    def sdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sdf_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.sdf_grad(x)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Closest-point projection via one distance-gradient step."""
        x = np.atleast_2d(x)
        return x - self.sdf(x)[:, None] * self.sdf_grad(x)

    def interior_probes(self, count: int = OCCUPANCY_PROBES) -> np.ndarray:
        """Fixed quasi-random points strictly inside the shape."""
        lo, hi = self.bounds()
        margin = 0.02 * float(np.linalg.norm(hi - lo))
        sampler = qmc.Halton(d=3, scramble=False)
        picked = []
        need = count
        for _ in range(8):
            u = sampler.random(max(4 * need, 256))
            pts = lo + u * (hi - lo)
            inside = pts[self.sdf(pts) <= -margin]
            picked.append(inside)
            if sum(p.shape[0] for p in picked) >= count:
                break
            margin *= 0.5
        pts = np.concatenate(picked, axis=0)
        return pts[:count]


class SphereTarget(TargetShape):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, x):
        return np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) - self.radius

    def sdf_grad(self, x):
        d = np.atleast_2d(x) - self.center
        return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)

    def bounds(self):
        r = self.radius
        return self.center - r, self.center + r


class BoxTarget(TargetShape):
    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)

    def sdf(self, x):
        q = np.abs(np.atleast_2d(x) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def sdf_grad(self, x):
        x = np.atleast_2d(x)
        rel = x - self.center
        q = np.abs(rel) - self.half
        g = np.zeros_like(x)
        out = q.max(axis=1) > 0
        if np.any(out):
            qo = np.maximum(q[out], 0.0)
            qo /= np.maximum(np.linalg.norm(qo, axis=1, keepdims=True), 1e-300)
            g[out] = qo * np.sign(rel[out])
        ins = ~out
        if np.any(ins):
            k = np.argmax(q[ins], axis=1)
            rows = np.nonzero(ins)[0]
            g[rows, k] = np.sign(rel[rows, k])
            g[rows, k] = np.where(g[rows, k] == 0, 1.0, g[rows, k])
        return g

    def bounds(self):
        return self.center - self.half, self.center + self.half


class TorusTarget(TargetShape):
    """Torus around the z axis through `center`."""

    def __init__(self, center=(0.0, 0.0, 0.0), major_radius=0.6, minor_radius=0.25):
        self.center = np.asarray(center, dtype=np.float64)
        self.major = float(major_radius)
        self.minor = float(minor_radius)

    def sdf(self, x):
        rel = np.atleast_2d(x) - self.center
        rho = np.linalg.norm(rel[:, :2], axis=1)
        return np.hypot(rho - self.major, rel[:, 2]) - self.minor

    def sdf_grad(self, x):
        rel = np.atleast_2d(x) - self.center
        rho = np.maximum(np.linalg.norm(rel[:, :2], axis=1), 1e-300)
        qr = rho - self.major
        qlen = np.maximum(np.hypot(qr, rel[:, 2]), 1e-300)
        g = np.empty_like(rel)
        g[:, 0] = qr / qlen * rel[:, 0] / rho
        g[:, 1] = qr / qlen * rel[:, 1] / rho
        g[:, 2] = rel[:, 2] / qlen
        return g

    def bounds(self):
        r = self.major + self.minor
        lo = self.center - np.array([r, r, self.minor])
        return lo, self.center + np.array([r, r, self.minor])


class UnionTarget(TargetShape):
    """CSG union: pointwise minimum of part distances."""

    def __init__(self, parts):
        if not parts:
            raise ValueError("union of nothing")
        self.parts = list(parts)

    def _stack(self, x):
        return np.stack([p.sdf(x) for p in self.parts], axis=0)

    def sdf(self, x):
        return self._stack(x).min(axis=0)

    def sdf_grad(self, x):
        x = np.atleast_2d(x)
        values = self._stack(x)
        winner = values.argmin(axis=0)
        g = np.empty_like(x)
        for k, part in enumerate(self.parts):
            rows = winner == k
            if np.any(rows):
                g[rows] = part.sdf_grad(x[rows])
        return g

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)


class MeshTarget(TargetShape):
    """Watertight triangle mesh queried through a BVH."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.bvh = TriangleBVH(vertices, faces)
        tri = np.asarray(vertices, dtype=np.float64)[faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        self._face_normals = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def sdf(self, x):
        x = np.atleast_2d(x)
        dist, _, _ = self.bvh.closest_point(x)
        sign = np.where(self.bvh.contains(x), -1.0, 1.0)
        return sign * dist

    def sdf_grad(self, x):
        x = np.atleast_2d(x)
        dist, cp, _ = self.bvh.closest_point(x)
        sign = np.where(self.bvh.contains(x), -1.0, 1.0)
        d = x - cp
        return sign[:, None] * d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)

    def normal(self, x):
        x = np.atleast_2d(x)
        _, _, face = self.bvh.closest_point(x)
        return self._face_normals[face]

    def project(self, x):
        _, cp, _ = self.bvh.closest_point(np.atleast_2d(x))
        return cp

    def bounds(self):
        return self.bvh.vertices.min(axis=0), self.bvh.vertices.max(axis=0)


@dataclass
class LossWeights:
    """Weights of the optimization objective."""

    occupancy: float = 10.0
    distance: float = 250.0
    normal: float = 1.0
    fairness: float = 0.35
    odt: float = 0.1
    sign: float = 1.0

    def __post_init__(self):
        for name in ("occupancy", "distance", "normal", "fairness", "odt", "sign"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


# -- sampling -----------------------------------------------------------------

def draw_face_samples(areas: np.ndarray, n: int, rng: np.random.Generator):
    """Area-weighted face picks plus uniform barycentric coordinates."""
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    faces = rng.choice(areas.size, size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    bary = np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)
    return faces, bary


def sample_surface(mesh, n: int, seed: int):
    """Area-uniform samples: (points, normals, source face indices)."""
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    if mesh.n_faces == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    face_idx, bary = draw_face_samples(mesh.face_areas(), n, rng)
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = np.einsum("nk,nkj->nj", bary, tri)
    normals = mesh.face_normals()[face_idx]
    return pts, normals, face_idx


def _traced_face_normals(vertices, faces):
    a = gather(vertices, faces[:, 0])
    b = gather(vertices, faces[:, 1])
    c = gather(vertices, faces[:, 2])
    n = diff.cross(b - a, c - a)
    return n / norm_rows(n, eps=1e-300)


def _target_distance(x, target: TargetShape):
    """Traced target signed distance: value from the oracle, spatial
    gradient supplied analytically."""
    xp = diff.constant(x)
    val = target.sdf(xp).reshape(-1, 1)
    grad = target.sdf_grad(xp)
    if isinstance(x, Var):
        return Var(val, ((x, lambda g: g * grad),), "target_sdf")
    return val


@dataclass
class SamplingPlan:
    """Frozen combinatorial state of one recorded reconstruction loss:
    sample draws, detached target normals, and occupancy pairing."""

    face_idx: np.ndarray
    bary: np.ndarray
    target_normals: np.ndarray | None
    probe_count: int
    uncovered_probes: np.ndarray   # (k, 3) positions outside the mesh
    nearest_sample: np.ndarray     # (k,) sample index pulled toward each


def make_sampling_plan(vertices_plain: np.ndarray, faces: np.ndarray, target: TargetShape,
                       weights: LossWeights, n_samples: int, seed: int,
                       probes: np.ndarray | None = None) -> SamplingPlan:
    rng = np.random.default_rng(seed)
    tri = vertices_plain[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face_idx, bary = draw_face_samples(areas, n_samples, rng)
    x = np.einsum("nk,nkj->nj", bary, tri[face_idx])

    target_normals = None
    if weights.normal > 0:
        target_normals = target.normal(target.project(x))

    uncovered = np.zeros((0, 3))
    nearest = np.zeros(0, dtype=np.int64)
    probe_count = 0
    if weights.occupancy > 0 and probes is not None and probes.shape[0] > 0:
        probe_count = probes.shape[0]
        inside_mesh = parity_inside_grid(vertices_plain, faces, probes)
        missing = np.nonzero(~inside_mesh)[0]
        if missing.size:
            uncovered = probes[missing]
            nearest = cKDTree(x).query(uncovered)[1]
    return SamplingPlan(face_idx, bary, target_normals, probe_count, uncovered, nearest)


def recon_loss(vertices, faces: np.ndarray, target: TargetShape, weights: LossWeights,
               n_samples: int, seed: int, probes: np.ndarray | None = None,
               plan: SamplingPlan | None = None):
    """Distance + normal + occupancy surrogate objective; vertices may be a Var.

    All sampling combinatorics (face draws, probe containment, nearest
    picks, detached target normals) live in the plan, built here from
    the current values unless one is passed in.
    """
    verts_plain = diff.constant(vertices)
    if plan is None:
        plan = make_sampling_plan(verts_plain, faces, target, weights, n_samples, seed, probes)

    f = faces[plan.face_idx]
    bary = plan.bary
    x = (gather(vertices, f[:, 0]) * bary[:, 0:1]
         + gather(vertices, f[:, 1]) * bary[:, 1:2]
         + gather(vertices, f[:, 2]) * bary[:, 2:3])

    sd = _target_distance(x, target)
    loss = weights.distance * vmean(sd * sd)

    if weights.normal > 0 and plan.target_normals is not None:
        face_n = _traced_face_normals(vertices, faces)
        n_hat = gather(face_n, plan.face_idx)
        dn = n_hat - plan.target_normals
        loss = loss + weights.normal * vmean(rows_dot(dn, dn))

    if plan.uncovered_probes.shape[0]:
        dz = gather(x, plan.nearest_sample) - plan.uncovered_probes
        loss = loss + weights.occupancy * (vsum(rows_dot(dz, dz)) / float(plan.probe_count))
    return loss


def per_sample_error(mesh, target: TargetShape, n: int, seed: int,
                     beta: float = EDGE_ERROR_WEIGHT):
    """(positions, errors) driving adaptive refinement: distance plus
    normal misalignment per surface sample."""
    pts, normals, _ = sample_surface(mesh, n, seed)
    if pts.shape[0] == 0:
        return pts, np.zeros(0)
    err = np.abs(target.sdf(pts))
    if beta:
        tn = target.normal(target.project(pts))
        err = err + beta * np.linalg.norm(normals - tn, axis=1)
    return pts, err
