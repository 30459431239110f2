"""Adaptive-precision geometric predicates.

Each predicate is evaluated in double precision first; when the result
magnitude falls below a forward error bound it is recomputed in exact
rational arithmetic (Python's Fraction converts binary doubles exactly),
so the returned sign is always correct.
"""

from fractions import Fraction

import numpy as np

_EPS = np.finfo(np.float64).eps / 2  # half-ulp machine epsilon, 2^-53

# Shewchuk's static filter constants for the determinant expansions.
_O3D_BOUND = (7.0 + 56.0 * _EPS) * _EPS
_ISP_BOUND = (16.0 + 224.0 * _EPS) * _EPS


def _orient3d_det(ax, ay, az, bx, by, bz, cx, cy, cz):
    # det of rows (a, b, c); works for float and Fraction alike
    return (
        ax * (by * cz - bz * cy)
        - ay * (bx * cz - bz * cx)
        + az * (bx * cy - by * cx)
    )


def orient3d(a, b, c, d) -> int:
    """Sign of the orientation of tetrahedron (a, b, c, d).

    Returns +1 when d lies on the positive side of plane (a, b, c)
    (i.e. det[b-a, c-a, d-a] > 0), -1 on the other side, 0 if coplanar.
    Exact: falls back to rational arithmetic near zero.
    """
    adx, ady, adz = a[0] - d[0], a[1] - d[1], a[2] - d[2]
    bdx, bdy, bdz = b[0] - d[0], b[1] - d[1], b[2] - d[2]
    cdx, cdy, cdz = c[0] - d[0], c[1] - d[1], c[2] - d[2]

    det = _orient3d_det(adx, ady, adz, bdx, bdy, bdz, cdx, cdy, cdz)
    permanent = (
        abs(adx) * (abs(bdy) * abs(cdz) + abs(bdz) * abs(cdy))
        + abs(ady) * (abs(bdx) * abs(cdz) + abs(bdz) * abs(cdx))
        + abs(adz) * (abs(bdx) * abs(cdy) + abs(bdy) * abs(cdx))
    )
    # det over rows (a-d, b-d, c-d) is the negative of det[b-a, c-a, d-a]
    if abs(det) > _O3D_BOUND * permanent:
        return -_sign(det)
    return -_sign(_orient3d_exact(a, b, c, d))


def _orient3d_exact(a, b, c, d):
    fa = [Fraction(float(v)) for v in a]
    fb = [Fraction(float(v)) for v in b]
    fc = [Fraction(float(v)) for v in c]
    fd = [Fraction(float(v)) for v in d]
    return _orient3d_det(
        fa[0] - fd[0], fa[1] - fd[1], fa[2] - fd[2],
        fb[0] - fd[0], fb[1] - fd[1], fb[2] - fd[2],
        fc[0] - fd[0], fc[1] - fd[1], fc[2] - fd[2],
    )


def _sign(x) -> int:
    if x > 0:
        return 1
    if x < 0:
        return -1
    return 0


def insphere(a, b, c, d, e) -> int:
    """Sign of the insphere test for point e against the circumsphere of (a, b, c, d).

    For a POSITIVELY oriented tet (orient3d(a,b,c,d) > 0): +1 when e is
    strictly inside the circumsphere, -1 outside, 0 on it. Exact fallback.
    """
    cols = []
    for p in (a, b, c, d):
        px, py, pz = p[0] - e[0], p[1] - e[1], p[2] - e[2]
        cols.append((px, py, pz, px * px + py * py + pz * pz))

    det = _det4(cols)
    permanent = _det4_permanent(cols)
    if abs(det) > _ISP_BOUND * permanent:
        return -_sign(det)
    fcols = []
    for p in (a, b, c, d):
        px = Fraction(float(p[0])) - Fraction(float(e[0]))
        py = Fraction(float(p[1])) - Fraction(float(e[1]))
        pz = Fraction(float(p[2])) - Fraction(float(e[2]))
        fcols.append((px, py, pz, px * px + py * py + pz * pz))
    return -_sign(_det4(fcols))


def _det4(rows):
    (ax, ay, az, aw), (bx, by, bz, bw), (cx, cy, cz, cw), (dx, dy, dz, dw) = rows
    ab = ax * by - bx * ay
    ac = ax * cy - cx * ay
    ad = ax * dy - dx * ay
    bc = bx * cy - cx * by
    bd = bx * dy - dx * by
    cd = cx * dy - dx * cy
    abc = az * bc - bz * ac + cz * ab
    abd = az * bd - bz * ad + dz * ab
    acd = az * cd - cz * ad + dz * ac
    bcd = bz * cd - cz * bd + dz * bc
    return dw * abc - cw * abd + bw * acd - aw * bcd


def _det4_permanent(rows):
    r = [tuple(abs(v) for v in row) for row in rows]
    (ax, ay, az, aw), (bx, by, bz, bw), (cx, cy, cz, cw), (dx, dy, dz, dw) = r
    ab = ax * by + bx * ay
    ac = ax * cy + cx * ay
    ad = ax * dy + dx * ay
    bc = bx * cy + cx * by
    bd = bx * dy + dx * by
    cd = cx * dy + dx * cy
    abc = az * bc + bz * ac + cz * ab
    abd = az * bd + bz * ad + dz * ab
    acd = az * cd + cz * ad + dz * ac
    bcd = bz * cd + cz * bd + dz * bc
    return dw * abc + cw * abd + bw * acd + aw * bcd


def orient3d_batch(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized orient3d over row-aligned point arrays; exact only where filtered."""
    ad = a - d
    bd = b - d
    cd = c - d
    det = (
        ad[:, 0] * (bd[:, 1] * cd[:, 2] - bd[:, 2] * cd[:, 1])
        - ad[:, 1] * (bd[:, 0] * cd[:, 2] - bd[:, 2] * cd[:, 0])
        + ad[:, 2] * (bd[:, 0] * cd[:, 1] - bd[:, 1] * cd[:, 0])
    )
    aad, abd, acd = np.abs(ad), np.abs(bd), np.abs(cd)
    permanent = (
        aad[:, 0] * (abd[:, 1] * acd[:, 2] + abd[:, 2] * acd[:, 1])
        + aad[:, 1] * (abd[:, 0] * acd[:, 2] + abd[:, 2] * acd[:, 0])
        + aad[:, 2] * (abd[:, 0] * acd[:, 1] + abd[:, 1] * acd[:, 0])
    )
    out = -np.sign(det).astype(np.int64)
    unsure = np.abs(det) <= _O3D_BOUND * permanent
    for k in np.nonzero(unsure)[0]:
        out[k] = orient3d(a[k], b[k], c[k], d[k])
    return out
