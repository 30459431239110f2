"""Reverse-mode gradient tape over numpy arrays.

The per-iteration computation has a fixed structure (losses -> mesh
vertices -> directional signed distances -> parameters), so a small
specialized tape is enough: Var wraps an ndarray, records parents and
VJP closures, and backward() walks the recorded ops in reverse creation
order with deterministic accumulation.

Math helpers (sqrt, tanh, arccos, ...) dispatch on input type so the
same formula code runs traced (Var) or plain (ndarray).
"""

from __future__ import annotations

import numpy as np

from .errors import NanPropagationError

__all__ = [
    "Var", "ParamGradients", "backward", "finite_diff_check",
    "sqrt", "tanh", "arccos", "log", "exp", "absolute", "softplus",
    "sigmoid", "vsum", "vmean", "gather", "col", "rows_dot", "cross",
    "norm_rows", "clip_min", "where_mask", "concat_cols", "constant",
]


class Var:
    """A node in the recorded computation: value, parents, and their VJPs."""

    __slots__ = ("value", "grad", "_parents", "_order", "name")

    _counter = 0

    def __init__(self, value, parents=(), name="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents  # tuple of (Var, vjp callable)
        Var._counter += 1
        self._order = Var._counter
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            return Var(self.value + other.value,
                       ((self, lambda g: _unbroadcast(g, self.shape)),
                        (other, lambda g: _unbroadcast(g, other.shape))), "add")
        return Var(self.value + other, ((self, lambda g: _unbroadcast(g, self.shape)),), "add")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return Var(self.value - other.value,
                       ((self, lambda g: _unbroadcast(g, self.shape)),
                        (other, lambda g: _unbroadcast(-g, other.shape))), "sub")
        return Var(self.value - other, ((self, lambda g: _unbroadcast(g, self.shape)),), "sub")

    def __rsub__(self, other):
        return Var(other - self.value, ((self, lambda g: _unbroadcast(-g, self.shape)),), "rsub")

    def __mul__(self, other):
        if isinstance(other, Var):
            return Var(self.value * other.value,
                       ((self, lambda g: _unbroadcast(g * other.value, self.shape)),
                        (other, lambda g: _unbroadcast(g * self.value, other.shape))), "mul")
        return Var(self.value * other,
                   ((self, lambda g: _unbroadcast(g * other, self.shape)),), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            inv = 1.0 / other.value
            return Var(self.value * inv,
                       ((self, lambda g: _unbroadcast(g * inv, self.shape)),
                        (other, lambda g: _unbroadcast(-g * self.value * inv * inv, other.shape))),
                       "div")
        return Var(self.value / other,
                   ((self, lambda g: _unbroadcast(g / other, self.shape)),), "div")

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        return Var(other * inv,
                   ((self, lambda g: _unbroadcast(-g * other * inv * inv, self.shape)),), "rdiv")

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),), "neg")

    def __pow__(self, k):
        if not np.isscalar(k):
            raise TypeError("Var ** exponent must be a scalar")
        return Var(self.value ** k,
                   ((self, lambda g: g * k * self.value ** (k - 1)),), "pow")

    def item(self) -> float:
        return float(self.value)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape`."""
    g = np.asarray(grad)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def constant(x) -> np.ndarray:
    """Detach: returns the plain value (drops tracing)."""
    return _value(x)


# -- dispatching math ops ----------------------------------------------------

def sqrt(x):
    if isinstance(x, Var):
        y = np.sqrt(x.value)
        return Var(y, ((x, lambda g: g * 0.5 / y),), "sqrt")
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, Var):
        y = np.tanh(x.value)
        return Var(y, ((x, lambda g: g * (1.0 - y * y)),), "tanh")
    return np.tanh(x)


def exp(x):
    if isinstance(x, Var):
        y = np.exp(x.value)
        return Var(y, ((x, lambda g: g * y),), "exp")
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return Var(np.log(x.value), ((x, lambda g: g / x.value),), "log")
    return np.log(x)


def absolute(x):
    # subgradient 0 at the kink
    if isinstance(x, Var):
        s = np.sign(x.value)
        return Var(np.abs(x.value), ((x, lambda g: g * s),), "abs")
    return np.abs(x)


def arccos(x):
    # inputs are clamped slightly inside (-1, 1) by callers; derivative -1/sqrt(1-x^2)
    if isinstance(x, Var):
        d = -1.0 / np.sqrt(np.maximum(1.0 - x.value * x.value, 1e-300))
        return Var(np.arccos(x.value), ((x, lambda g: g * d),), "arccos")
    return np.arccos(x)


def softplus(x):
    """log(1 + exp(x)), overflow-safe; derivative is the sigmoid."""
    if isinstance(x, Var):
        v = x.value
        y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
        s = _sigmoid_np(v)
        return Var(y, ((x, lambda g: g * s),), "softplus")
    v = np.asarray(x, dtype=np.float64)
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    if isinstance(x, Var):
        y = _sigmoid_np(x.value)
        return Var(y, ((x, lambda g: g * y * (1.0 - y)),), "sigmoid")
    return _sigmoid_np(np.asarray(x, dtype=np.float64))


def clip_min(x, lo):
    """max(x, lo) with pass-through gradient where x > lo."""
    if isinstance(x, Var):
        mask = (x.value > lo).astype(np.float64)
        return Var(np.maximum(x.value, lo), ((x, lambda g: g * mask),), "clip_min")
    return np.maximum(x, lo)


def vsum(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, x.shape).copy()
            gg = np.asarray(g)
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return np.broadcast_to(gg, x.shape).copy()
        return Var(x.value.sum(axis=axis, keepdims=keepdims), ((x, vjp),), "sum")
    return np.sum(x, axis=axis, keepdims=keepdims)


def vmean(x, axis=None, keepdims=False):
    n = np.prod(_value(x).shape) if axis is None else _value(x).shape[axis]
    return vsum(x, axis=axis, keepdims=keepdims) / float(n)


def gather(x, idx):
    """Row gather x[idx]; backward scatter-adds (np.add.at, deterministic)."""
    idx = np.asarray(idx)
    if isinstance(x, Var):
        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out, idx, g)
            return out
        return Var(x.value[idx], ((x, vjp),), "gather")
    return x[idx]


def col(x, k):
    """Column slice x[:, k:k+1]."""
    if isinstance(x, Var):
        def vjp(g):
            out = np.zeros_like(x.value)
            out[:, k:k + 1] = g
            return out
        return Var(x.value[:, k:k + 1], ((x, vjp),), "col")
    return x[:, k:k + 1]


def concat_cols(parts):
    """Stack (m,1) pieces into (m,k)."""
    if any(isinstance(p, Var) for p in parts):
        vals = [_value(p) for p in parts]
        parents = []
        for j, p in enumerate(parts):
            if isinstance(p, Var):
                parents.append((p, (lambda jj: lambda g: g[:, jj:jj + 1])(j)))
        return Var(np.concatenate(vals, axis=1), tuple(parents), "concat_cols")
    return np.concatenate(parts, axis=1)


def rows_dot(a, b):
    """Row-wise dot product of (m,k) inputs -> (m,1)."""
    if isinstance(a, Var) or isinstance(b, Var):
        return vsum(a * b, axis=1, keepdims=True)
    return np.sum(a * b, axis=1, keepdims=True)


def cross(a, b):
    """Row-wise 3D cross product."""
    ax, ay, az = col(a, 0), col(a, 1), col(a, 2)
    bx, by, bz = col(b, 0), col(b, 1), col(b, 2)
    return concat_cols([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx])


def norm_rows(x, eps=0.0):
    """Row-wise Euclidean norm -> (m,1); eps guards the sqrt at zero."""
    q = rows_dot(x, x)
    if eps:
        q = clip_min(q, eps)
    return sqrt(q)


def where_mask(mask, x):
    """Multiply by a constant 0/1 mask (gradient gated identically)."""
    m = np.asarray(mask, dtype=np.float64)
    return x * m


# -- backward ---------------------------------------------------------------

class ParamGradients:
    """Per-parameter-class gradient accumulators aligned with a PointSet."""

    def __init__(self, d_positions, d_sdf, d_sh):
        self.d_positions = d_positions
        self.d_sdf = d_sdf
        self.d_sh = d_sh

    def check_finite(self):
        for name, a in (("d_positions", self.d_positions),
                        ("d_sdf", self.d_sdf), ("d_sh", self.d_sh)):
            if not np.all(np.isfinite(a)):
                raise NanPropagationError(name)
        return self


def backward(loss: Var, seed: float = 1.0) -> dict:
    """Reverse pass from a scalar loss; returns {Var(id): grad ndarray} for leaves.

    Accumulation is in reverse creation order, so results are
    reproducible bit-for-bit for identical recordings.
    """
    if not np.all(np.isfinite(loss.value)):
        _raise_first_nonfinite(loss)

    topo = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.broadcast_to(np.float64(seed), loss.shape).copy()}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in topo:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaf_grads[id(node)] = g
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            if not np.all(np.isfinite(contrib)):
                raise NanPropagationError(node.name)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(contrib, dtype=np.float64)
            else:
                acc += contrib
    return leaf_grads


def grad_of(leaf_grads: dict, leaf: Var) -> np.ndarray:
    g = leaf_grads.get(id(leaf))
    if g is None:
        return np.zeros_like(leaf.value)
    return g


def _toposort(root: Var):
    seen = set()
    out = []
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent, _ in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            out.append(node)
            stack.pop()
    # children before parents when traversed in reverse creation order
    out.sort(key=lambda v: v._order, reverse=True)
    return out


def _raise_first_nonfinite(root: Var):
    nodes = _toposort(root)
    for node in reversed(nodes):  # creation order
        if not np.all(np.isfinite(node.value)):
            raise NanPropagationError(node.name)
    raise NanPropagationError(root.name)


# -- finite differences -------------------------------------------------------

class FiniteDiffReport:
    """Outcome of a finite-difference sweep: per-class max error + skips."""

    def __init__(self):
        self.max_rel_error = {}
        self.checked = {}
        self.skipped = {}

    def record(self, cls, rel_err):
        self.max_rel_error[cls] = max(self.max_rel_error.get(cls, 0.0), rel_err)
        self.checked[cls] = self.checked.get(cls, 0) + 1

    def skip(self, cls):
        self.skipped[cls] = self.skipped.get(cls, 0) + 1

    def passed(self, tol):
        return all(e < tol for e in self.max_rel_error.values())

    def __repr__(self):
        parts = [f"{c}: max_rel={e:.3e} (n={self.checked[c]}, skipped={self.skipped.get(c, 0)})"
                 for c, e in sorted(self.max_rel_error.items())]
        return "FiniteDiffReport(" + "; ".join(parts) + ")"


def finite_diff_check(loss_fn, params, h=1e-6, tol=1e-5, max_per_class=None, rng=None):
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn(positions, sdf, sh) must return (loss, fingerprint) — loss a
    Var when inputs are Vars, a float otherwise; fingerprint hashes the
    combinatorial state.  Parameters whose perturbation flips the
    fingerprint are skipped (nonsmooth), not failed.
    """
    positions, sdf, sh = (np.array(p, dtype=np.float64) for p in params)
    p_var, s_var, c_var = Var(positions), Var(sdf), Var(sh)
    loss, fp0 = loss_fn(p_var, s_var, c_var)
    leaf = backward(loss)
    analytic = {
        "positions": grad_of(leaf, p_var),
        "sdf": grad_of(leaf, s_var),
        "sh": grad_of(leaf, c_var),
    }

    report = FiniteDiffReport()
    arrays = {"positions": positions, "sdf": sdf, "sh": sh}
    for cls, arr in arrays.items():
        flat_idx = np.arange(arr.size)
        if max_per_class is not None and arr.size > max_per_class:
            r = rng if rng is not None else np.random.default_rng(0)
            flat_idx = np.sort(r.choice(arr.size, size=max_per_class, replace=False))
        flat = arr.reshape(-1)
        for k in flat_idx:
            orig = flat[k]
            flat[k] = orig + h
            lp, fpp = loss_fn(positions, sdf, sh)
            flat[k] = orig - h
            lm, fpm = loss_fn(positions, sdf, sh)
            flat[k] = orig
            if fpp != fp0 or fpm != fp0:
                report.skip(cls)
                continue
            fd = (float(lp) - float(lm)) / (2.0 * h)
            an = float(analytic[cls].reshape(-1)[k])
            denom = max(abs(fd), abs(an), 1e-2)
            report.record(cls, abs(fd - an) / denom)
    return report
