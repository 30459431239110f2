"""Two-stage optimization driver.

Main stage: every iteration scores the extracted surface against the
target, backpropagates, updates signed distances and SH coefficients
immediately, and accumulates position gradients; positions are applied
and the Delaunay grid rebuilt every `rebuild_interval` iterations, with
importance-driven resampling scheduled just before rebuild boundaries.
Late stage: positions and connectivity frozen, grid-quality regularizers
off, only signed distances and SH coefficients refine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diff
from .diff import Var, backward, grad_of
from .errors import DivergedError
from .extract import SurfaceMesh, edge_vertices, largest_component, marching_tets, mt_topology
from .grid import PointSet, active_edges, delaunay, init_points
from .refine import build_importance, builtin_importance, resample_with_map
from .regularize import fairness_loss, odt_loss, sign_loss
from .supervise import LossWeights, TargetShape, per_sample_error, recon_loss

HISTORY_COLUMNS = ("iteration", "loss_total", "loss_recon", "loss_fairness",
                   "loss_odt", "loss_sign", "points", "vertices")


@dataclass
class OptimConfig:
    """Knobs of the optimization; defaults follow the reference setup."""

    target_points: int = 16000
    sh_degree: int = 2
    main_iters: int = 5000
    late_iters: int = 2000
    rebuild_interval: int = 5
    lr_sdf: float = 0.002
    lr_pos: float = 0.0003
    lr_sh: float = 0.002
    weights: LossWeights = field(default_factory=LossWeights)
    samples_per_iter: int = 4096
    seed: int = 0
    init_count: int | None = None          # default: min(8000, target_points)
    init_radius: float = math.sqrt(3.0)
    refine_interval: int = 250
    refine_fraction: float = 0.125
    importance_kind: str = "error"         # error | uniform | axis_cubic | radial
    importance_res: int = 32
    occupancy_probes: int = 512
    empty_limit: int = 50
    weight_decay: float = 0.0

    def __post_init__(self):
        if min(self.target_points, self.main_iters, self.late_iters) < 0:
            raise ValueError("counts must be non-negative")
        if self.rebuild_interval < 1:
            raise ValueError("rebuild interval must be >= 1")
        if min(self.lr_sdf, self.lr_pos, self.lr_sh) <= 0:
            raise ValueError("learning rates must be positive")

    def resolved_init_count(self) -> int:
        if self.init_count is not None:
            return self.init_count
        return min(8000, self.target_points)


class AdamState:
    """First/second moment accumulators with decoupled weight decay."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0

    def remap(self, keep: np.ndarray, n_new: int):
        """Carry rows of kept parameters across a resample reindexing."""
        m = np.zeros((n_new,) + self.m.shape[1:])
        v = np.zeros_like(m)
        m[:keep.size] = self.m[keep]
        v[:keep.size] = self.v[keep]
        self.m, self.v = m, v


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> np.ndarray:
    """One AdamW update; returns the new parameter array."""
    if params.shape != grads.shape:
        raise ValueError("parameter/gradient shape mismatch")
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    out = params - lr * mhat / (np.sqrt(vhat) + eps)
    if weight_decay:
        out = out - lr * weight_decay * params
    return out


@dataclass
class FitResult:
    point_set: PointSet
    mesh: SurfaceMesh
    history: list
    grid: object = None


def _iteration_seed(seed: int, tag: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, tag, iteration]).generate_state(1)[0])


def fit(target: TargetShape, cfg: OptimConfig) -> FitResult:
    """Run the full two-stage optimization against a target shape."""
    ps = init_points(cfg.resolved_init_count(), cfg.init_radius, cfg.seed,
                     degree=cfg.sh_degree)
    probes = target.interior_probes(cfg.occupancy_probes) if cfg.weights.occupancy > 0 else None
    grid = delaunay(ps)

    sdf_state = AdamState(ps.sdf.shape)
    sh_state = AdamState(ps.sh.shape)
    pos_state = AdamState(ps.positions.shape)
    pos_accum = np.zeros_like(ps.positions)

    history = []
    empty_streak = 0
    since_refine = 0
    w = cfg.weights

    for it in range(cfg.main_iters):
        aeset = active_edges(grid, ps)
        if len(aeset) == 0:
            empty_streak += 1
            _check_diverged(empty_streak, cfg, ps, it)
            history.append(_history_row(it, math.nan, 0.0, 0.0, 0.0, ps.n, 0))
            continue
        empty_streak = 0

        p_var, s_var, c_var = Var(ps.positions), Var(ps.sdf), Var(ps.sh)
        faces = mt_topology(grid.tets, ps.is_negative(), aeset.pairs)
        verts = edge_vertices(ps, aeset.pairs, positions=p_var, sdf=s_var, sh=c_var)
        l_rec = recon_loss(verts, faces, target, w, cfg.samples_per_iter,
                           _iteration_seed(cfg.seed, 1, it), probes)
        l_fair = fairness_loss(verts, faces) if w.fairness > 0 else None
        l_odt = odt_loss(grid, ps, positions=p_var) if w.odt > 0 else None
        l_sign = sign_loss(s_var, aeset) if w.sign > 0 else None
        total = l_rec
        if l_fair is not None:
            total = total + w.fairness * l_fair
        if l_odt is not None:
            total = total + w.odt * l_odt
        if l_sign is not None:
            total = total + w.sign * l_sign

        leaf = backward(total)
        pos_accum += grad_of(leaf, p_var)
        ps.sdf[:] = adam_step(sdf_state, ps.sdf, grad_of(leaf, s_var), cfg.lr_sdf,
                              weight_decay=cfg.weight_decay)
        ps.sh[:] = adam_step(sh_state, ps.sh, grad_of(leaf, c_var), cfg.lr_sh,
                             weight_decay=cfg.weight_decay)

        history.append(_history_row(
            it, float(total.value), float(l_rec.value),
            _maybe(l_fair), _maybe(l_odt), _maybe(l_sign), ps.n, len(aeset)))

        since_refine += 1
        if (it + 1) % cfg.rebuild_interval == 0:
            if since_refine >= cfg.refine_interval and ps.n < cfg.target_points:
                ps, grid, pos_accum = _refine_event(ps, grid, target, cfg, it,
                                                    (sdf_state, sh_state, pos_state),
                                                    pos_accum)
                since_refine = 0
            ps.positions[:] = adam_step(pos_state, ps.positions, pos_accum, cfg.lr_pos,
                                        weight_decay=cfg.weight_decay)
            ps.bump_positions()
            pos_accum[:] = 0.0
            grid = delaunay(ps)

    for it in range(cfg.main_iters, cfg.main_iters + cfg.late_iters):
        aeset = active_edges(grid, ps)
        if len(aeset) == 0:
            empty_streak += 1
            _check_diverged(empty_streak, cfg, ps, it)
            history.append(_history_row(it, math.nan, 0.0, 0.0, 0.0, ps.n, 0))
            continue
        empty_streak = 0
        s_var, c_var = Var(ps.sdf), Var(ps.sh)
        faces = mt_topology(grid.tets, ps.is_negative(), aeset.pairs)
        verts = edge_vertices(ps, aeset.pairs, sdf=s_var, sh=c_var)
        l_rec = recon_loss(verts, faces, target, w, cfg.samples_per_iter,
                           _iteration_seed(cfg.seed, 1, it), probes)
        l_sign = sign_loss(s_var, aeset) if w.sign > 0 else None
        total = l_rec if l_sign is None else l_rec + w.sign * l_sign
        leaf = backward(total)
        ps.sdf[:] = adam_step(sdf_state, ps.sdf, grad_of(leaf, s_var), cfg.lr_sdf,
                              weight_decay=cfg.weight_decay)
        ps.sh[:] = adam_step(sh_state, ps.sh, grad_of(leaf, c_var), cfg.lr_sh,
                             weight_decay=cfg.weight_decay)
        history.append(_history_row(
            it, float(total.value), float(l_rec.value), 0.0, 0.0, _maybe(l_sign),
            ps.n, len(aeset)))

    mesh = largest_component(marching_tets(grid, ps))
    return FitResult(ps, mesh, history, grid)


def _maybe(loss) -> float:
    return float(loss.value) if loss is not None else 0.0


def _history_row(it, total, rec, fair, odt, sign, points, vertices):
    return {
        "iteration": it, "loss_total": total, "loss_recon": rec,
        "loss_fairness": fair, "loss_odt": odt, "loss_sign": sign,
        "points": points, "vertices": vertices,
    }


def _check_diverged(streak: int, cfg: OptimConfig, ps: PointSet, it: int):
    if streak >= cfg.empty_limit:
        raise DivergedError(
            f"extraction empty for {streak} consecutive iterations (iteration {it})",
            snapshot={"iteration": it, "point_set": ps.copy()})


def _refine_event(ps, grid, target, cfg, it, states, pos_accum):
    mesh = marching_tets(grid, ps)
    if mesh.n_faces == 0:
        return ps, grid, pos_accum
    if cfg.importance_kind == "error":
        pts, errs = per_sample_error(mesh, target, cfg.samples_per_iter,
                                     _iteration_seed(cfg.seed, 2, it))
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        pad = 1e-6 + 1e-6 * np.abs(hi - lo)
        imp = build_importance(pts, errs, (lo - pad, hi + pad), cfg.importance_res)
    else:
        imp = builtin_importance(cfg.importance_kind, mesh, cfg.importance_res)
    budget = cfg.target_points - ps.n
    K = min(budget, max(1, math.ceil(cfg.refine_fraction * cfg.target_points)))
    new_ps, keep = resample_with_map(ps, grid, imp, K, _iteration_seed(cfg.seed, 3, it))
    for st in states:
        st.remap(keep, new_ps.n)
    accum = np.zeros((new_ps.n, 3))
    accum[:keep.size] = pos_accum[keep]
    new_grid = delaunay(new_ps)
    return new_ps, new_grid, accum


# -- config & history files ---------------------------------------------------

def parse_config_file(path: str) -> dict:
    """Flat `key = value` pairs; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.lower()] = value
    return out


_CONFIG_FIELDS = {
    "target_points": int, "sh_degree": int, "main_iters": int, "late_iters": int,
    "rebuild_interval": int, "lr_sdf": float, "lr_pos": float, "lr_sh": float,
    "samples_per_iter": int, "seed": int, "init_count": int, "init_radius": float,
    "refine_interval": int, "refine_fraction": float, "importance_kind": str,
    "importance_res": int, "occupancy_probes": int, "empty_limit": int,
    "weight_decay": float,
}
_WEIGHT_FIELDS = {
    "lambda_occupancy": "occupancy", "lambda_distance": "distance",
    "lambda_normal": "normal", "lambda_fairness": "fairness",
    "lambda_odt": "odt", "lambda_sign": "sign",
}


def config_from_mapping(mapping: dict) -> OptimConfig:
    kwargs = {}
    weights = {}
    for key, value in mapping.items():
        if key in _CONFIG_FIELDS:
            kwargs[key] = _CONFIG_FIELDS[key](value)
        elif key in _WEIGHT_FIELDS:
            weights[_WEIGHT_FIELDS[key]] = float(value)
    cfg = OptimConfig(**kwargs)
    if weights:
        cfg = replace(cfg, weights=replace(cfg.weights, **weights))
    return cfg


def target_from_mapping(mapping: dict) -> TargetShape:
    from . import supervise as sv

    kind = mapping.get("target", "sphere").strip().lower()
    center = _parse_vec(mapping.get("target_center", "0,0,0"))
    if kind == "sphere":
        return sv.SphereTarget(center, float(mapping.get("target_radius", 0.7)))
    if kind == "box":
        return sv.BoxTarget(center, _parse_vec(mapping.get("box_half", "0.5,0.5,0.5")))
    if kind == "torus":
        return sv.TorusTarget(center, float(mapping.get("torus_major", 0.6)),
                              float(mapping.get("torus_minor", 0.25)))
    if kind == "union":
        parts = []
        for spec in mapping.get("union_parts", "").split(";"):
            spec = spec.strip()
            if spec:
                parts.append(_parse_part(spec))
        if not parts:
            raise ValueError("union target needs union_parts")
        return sv.UnionTarget(parts)
    if kind == "mesh":
        from .io import import_mesh
        mesh = import_mesh(mapping["target_mesh"])
        return sv.MeshTarget(mesh.vertices, mesh.faces)
    raise ValueError(f"unknown target kind {kind!r}")


def _parse_vec(text: str) -> np.ndarray:
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected 3 numbers, got {text!r}")
    return np.array(parts)


def _parse_part(spec: str):
    from . import supervise as sv

    tokens = spec.split()
    kind = tokens[0].lower()
    vals = [float(t) for t in tokens[1:]]
    if kind == "sphere" and len(vals) == 4:
        return sv.SphereTarget(vals[1:4], vals[0])
    if kind == "box" and len(vals) == 6:
        return sv.BoxTarget(vals[3:6], vals[0:3])
    if kind == "torus" and len(vals) == 5:
        return sv.TorusTarget(vals[2:5], vals[0], vals[1])
    raise ValueError(f"bad union part {spec!r}")


def write_history(history: list, path: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
