"""Real spherical harmonics and the directional signed distance.

Convention (fixed for format stability): orthonormal real basis without
the Condon-Shortley sign, packed in (l, m) order with l = 0..d and
m = -l..l, so band k = l*l + l + m.  Polar angle theta is measured from
+z, phi = atan2(y, x).  The basis is written in Cartesian form on the
unit sphere, which keeps gradients free of pole singularities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff
from .errors import DegenerateInputError

MAX_DEGREE = 4

_PI = math.pi
_C = {
    "00": 0.5 * math.sqrt(1.0 / _PI),
    "1": math.sqrt(3.0 / (4.0 * _PI)),
    "2a": 0.5 * math.sqrt(15.0 / _PI),
    "20": 0.25 * math.sqrt(5.0 / _PI),
    "22": 0.25 * math.sqrt(15.0 / _PI),
    "33": 0.25 * math.sqrt(35.0 / (2.0 * _PI)),
    "32": 0.5 * math.sqrt(105.0 / _PI),
    "31": 0.25 * math.sqrt(21.0 / (2.0 * _PI)),
    "30": 0.25 * math.sqrt(7.0 / _PI),
}

# One entry per band, callable on unit-vector components (ndarray or Var).
_BASIS = [
    # l = 0
    lambda x, y, z: x * 0.0 + _C["00"],
    # l = 1: m = -1, 0, 1
    lambda x, y, z: y * _C["1"],
    lambda x, y, z: z * _C["1"],
    lambda x, y, z: x * _C["1"],
    # l = 2: m = -2..2
    lambda x, y, z: x * y * _C["2a"],
    lambda x, y, z: y * z * _C["2a"],
    lambda x, y, z: (z * z * 3.0 - 1.0) * _C["20"],
    lambda x, y, z: x * z * _C["2a"],
    lambda x, y, z: (x * x - y * y) * _C["22"],
    # l = 3: m = -3..3
    lambda x, y, z: y * (x * x * 3.0 - y * y) * _C["33"],
    lambda x, y, z: x * y * z * _C["32"],
    lambda x, y, z: y * (z * z * 5.0 - 1.0) * _C["31"],
    lambda x, y, z: z * (z * z * 5.0 - 3.0) * _C["30"],
    lambda x, y, z: x * (z * z * 5.0 - 1.0) * _C["31"],
    lambda x, y, z: z * (x * x - y * y) * _C["32"] * 0.5,
    lambda x, y, z: x * (x * x - y * y * 3.0) * _C["33"],
    # l = 4: m = -4..4
    lambda x, y, z: x * y * (x * x - y * y) * (0.75 * math.sqrt(35.0 / _PI)),
    lambda x, y, z: y * z * (x * x * 3.0 - y * y) * (0.75 * math.sqrt(35.0 / (2.0 * _PI))),
    lambda x, y, z: x * y * (z * z * 7.0 - 1.0) * (0.75 * math.sqrt(5.0 / _PI)),
    lambda x, y, z: y * z * (z * z * 7.0 - 3.0) * (0.75 * math.sqrt(5.0 / (2.0 * _PI))),
    lambda x, y, z: (z * z * (z * z * 35.0 - 30.0) + 3.0) * (3.0 / 16.0 * math.sqrt(1.0 / _PI)),
    lambda x, y, z: x * z * (z * z * 7.0 - 3.0) * (0.75 * math.sqrt(5.0 / (2.0 * _PI))),
    lambda x, y, z: (x * x - y * y) * (z * z * 7.0 - 1.0) * (3.0 / 8.0 * math.sqrt(5.0 / _PI)),
    lambda x, y, z: x * z * (x * x - y * y * 3.0) * (0.75 * math.sqrt(35.0 / (2.0 * _PI))),
    lambda x, y, z: (x * x * (x * x - y * y * 6.0) + y * y * y * y) * (3.0 / 16.0 * math.sqrt(35.0 / _PI)),
]


@dataclass(frozen=True)
class SHBasis:
    """Basis metadata: degree, size, and band layout."""

    degree: int

    def __post_init__(self):
        if not 0 <= self.degree <= MAX_DEGREE:
            raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {self.degree}")

    @property
    def q(self) -> int:
        return (self.degree + 1) ** 2

    @property
    def bands(self) -> list[tuple[int, int]]:
        return [(l, m) for l in range(self.degree + 1) for m in range(-l, l + 1)]


def basis_size(degree: int) -> int:
    return (degree + 1) ** 2


def degree_for_size(q: int) -> int:
    d = int(round(math.sqrt(q))) - 1
    if d < 0 or (d + 1) ** 2 != q or d > MAX_DEGREE:
        raise ValueError(f"coefficient count {q} is not (d+1)^2 for a supported degree")
    return d


def direction_angles(p_i, p_j, eps: float = 1e-12):
    """Polar/azimuthal angles of p_j - p_i: theta in [0, pi], phi in (-pi, pi]."""
    v = np.asarray(p_j, dtype=np.float64) - np.asarray(p_i, dtype=np.float64)
    r = float(np.linalg.norm(v))
    if r < eps:
        raise DegenerateInputError("coincident points have no direction")
    theta = math.acos(min(1.0, max(-1.0, v[2] / r)))
    phi = math.atan2(v[1], v[0])
    if phi <= -math.pi:
        phi = math.pi
    return theta, phi


def unit_from_angles(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def basis_values(degree: int, nx, ny, nz):
    """All (d+1)^2 basis functions at unit direction columns; Var-compatible."""
    return [_BASIS[k](nx, ny, nz) for k in range(basis_size(degree))]


def sh_eval(theta, phi, c):
    """Sum_k c_k Y_k(theta, phi); angles may be scalars or equal-shape arrays."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("sh_eval expects a single coefficient vector")
    degree = degree_for_size(c.shape[0])
    scalar = np.ndim(theta) == 0 and np.ndim(phi) == 0
    n = unit_from_angles(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    n = n.reshape(-1, 3)
    vals = basis_values(degree, n[:, 0:1], n[:, 1:2], n[:, 2:3])
    out = np.concatenate(vals, axis=1) @ c
    return float(out[0]) if scalar else out.reshape(np.shape(theta))


def sh_project(degree: int, coeff_rows, nx, ny, nz):
    """Row-wise SH(theta, phi, c) = sum_k c_k Y_k for unit direction columns.

    coeff_rows is (m, q); nx/ny/nz are (m, 1).  Works traced or plain.
    """
    vals = basis_values(degree, nx, ny, nz)
    acc = diff.col(coeff_rows, 0) * vals[0]
    for k in range(1, len(vals)):
        acc = acc + diff.col(coeff_rows, k) * vals[k]
    return acc


def directional_sdf(i: int, e, ps) -> float:
    """Directional signed distance of point i along active edge e = (a, b)."""
    a, b = int(e[0]), int(e[1])
    if i == a:
        j = b
    elif i == b:
        j = a
    else:
        raise ValueError(f"point {i} is not an endpoint of edge {tuple(e)}")
    theta, phi = direction_angles(ps.positions[i], ps.positions[j])
    u = sh_eval(theta, phi, ps.sh[i])
    return (1.0 + math.tanh(u)) * float(ps.sdf[i])
