"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable operation wraps its result in a :class:`Var` carrying
the forward value and, per parent, a vector-Jacobian product closure.
``backward`` accumulates cotangents from a scalar loss down to the trainable
leaves in reverse topological order. There is no general scalar tape: matrix
operations (eigendecomposition, log-determinants) keep closed-form VJP rules.

``grad_check`` is the independent oracle: central finite differences of the
same function, compared coordinate by coordinate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics
from .errors import ContractViolation, DimensionError


class Var:
    """Node in the reverse-mode graph.

    `parents` is a tuple of (parent Var, vjp) pairs where vjp maps the
    cotangent of this node to a cotangent of that parent (same shape as the
    parent's value). Leaves have no parents; trainable leaves receive
    gradients from :func:`backward`.
    """

    __slots__ = ("value", "parents", "tag", "trainable")

    def __init__(self, value, parents=(), tag="leaf", trainable=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.tag = tag
        self.trainable = bool(trainable)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(tag={self.tag!r}, shape={self.value.shape})"

    # arithmetic sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(value, trainable=True, tag="leaf") -> Var:
    return Var(numerics.as_tensor(value), (), tag, trainable)


def constant(value, tag="const") -> Var:
    return Var(np.asarray(value, dtype=np.float64), (), tag, False)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
        "add",
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
        "sub",
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(
        av * bv,
        (
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
        "mul",
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(
        av / bv,
        (
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
        ),
        "div",
    )


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, ((a, lambda g: -g),), "neg")


def pow_const(a, p: float) -> Var:
    a = as_var(a)
    p = float(p)
    av = a.value
    return Var(av**p, ((a, lambda g: g * p * av ** (p - 1.0)),), "pow")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),), "exp")


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return Var(np.log(av), ((a, lambda g: g / av),), "log")


def log1p(a) -> Var:
    a = as_var(a)
    av = a.value
    return Var(np.log1p(av), ((a, lambda g: g / (1.0 + av)),), "log1p")


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, ((a, lambda g: g * 0.5 / out),), "sqrt")


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def relu(a) -> Var:
    """max(x, 0) with subgradient 0 at the kink."""
    a = as_var(a)
    av = a.value
    mask = av > 0.0
    return Var(np.where(mask, av, 0.0), ((a, lambda g: g * mask),), "relu")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_var(a)
    av = a.value
    mask = (av > lo) & (av < hi)
    return Var(np.clip(av, lo, hi), ((a, lambda g: g * mask),), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    av = a.value
    axes = None
    if axis is not None:
        axes = tuple(ax % av.ndim for ax in (axis if isinstance(axis, tuple) else (axis,)))
    out = np.sum(av, axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, av.shape).copy()

    return Var(out, ((a, vjp),), "sum")


def mean_(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),), "reshape")


def transpose(a, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Var(np.transpose(a.value, axes), ((a, lambda g: np.transpose(g, inv)),), "transpose")


def getitem(a, idx) -> Var:
    a = as_var(a)
    av = a.value
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        full[idx] = g
        return full

    return Var(out, ((a, vjp),), "getitem")


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Var(out, tuple((p, make_vjp(i)) for i, p in enumerate(parts)), "concat")


def tile_channels(a, n: int) -> Var:
    """Repeat axis 1 (channels) n times; vjp sums the copies."""
    a = as_var(a)
    c = a.value.shape[1]
    out = np.repeat(a.value, n, axis=1)

    def vjp(g):
        b = g.shape[0]
        rest = g.shape[2:]
        return g.reshape((b, c, n) + rest).sum(axis=2)

    return Var(out, ((a, vjp),), "tile_channels")


def matmul(a, b) -> Var:
    """numpy matmul semantics for operands of ndim >= 2 (leading dims broadcast)."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("matmul requires operands with ndim >= 2")
    out = av @ bv

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return Var(out, ((a, vjp_a), (b, vjp_b)), "matmul")


# ---------------------------------------------------------------------------
# symmetric eigendecomposition
# ---------------------------------------------------------------------------

DEGENERATE_EIG_TOL = 1e-8


def eigh(k) -> tuple[Var, Var]:
    """Differentiable symmetric eigendecomposition (descending eigenvalues).

    Eigenvalue cotangents map back as V diag(lbar) V^T. Eigenvector cotangents
    use the standard cross-difference rule; pairs closer than
    DEGENERATE_EIG_TOL * ||K||_2 get a zero cross-term (subgradient choice), so
    exactly degenerate kernels - e.g. identical images - never produce NaN.
    """
    k = as_var(k)
    lam, vec = numerics.sym_eig(k.value)
    scale = max(float(np.abs(lam).max()), 1e-300)

    def vjp_vals(g):
        out = (vec * g) @ vec.T
        return 0.5 * (out + out.T)

    def vjp_vecs(gv):
        diff = lam[None, :] - lam[:, None]  # diff[j, i] = lam_i - lam_j
        with np.errstate(divide="ignore"):
            f = np.where(np.abs(diff) < DEGENERATE_EIG_TOL * scale, 0.0, 1.0 / diff)
        out = vec @ (f * (vec.T @ gv)) @ vec.T
        return 0.5 * (out + out.T)

    vals = Var(lam, ((k, vjp_vals),), "eigh_vals")
    vecs = Var(vec, ((k, vjp_vecs),), "eigh_vecs")
    return vals, vecs


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


class GradientReport:
    """Cotangents for trainable leaves, keyed by the leaf Var itself."""

    def __init__(self, grads: dict, fd_max_rel_error: float | None = None):
        self.grads = grads
        self.fd_max_rel_error = fd_max_rel_error

    def of(self, var: Var) -> np.ndarray:
        return self.grads[var]


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    state: dict[int, int] = {}  # 0 absent, 1 on stack, 2 done
    stack: list[tuple[Var, int]] = [(root, 0)]
    while stack:
        node, pi = stack.pop()
        nid = id(node)
        if pi == 0:
            st = state.get(nid, 0)
            if st == 2:
                continue
            if st == 1:
                raise ContractViolation("cycle detected in differentiation graph")
            state[nid] = 1
        if pi < len(node.parents):
            stack.append((node, pi + 1))
            parent = node.parents[pi][0]
            if state.get(id(parent), 0) == 1:
                raise ContractViolation("cycle detected in differentiation graph")
            if state.get(id(parent), 0) == 0:
                stack.append((parent, 0))
        else:
            state[nid] = 2
            order.append(node)
    return order


def backward(loss: Var, params: Iterable[Var] | None = None) -> GradientReport:
    """Reverse accumulation from a scalar loss to all trainable leaves.

    If `params` is given, every listed leaf appears in the report (zeros when
    unreachable from the loss).
    """
    if loss.value.size != 1:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    grads: dict[Var, np.ndarray] = {}
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node.trainable and not node.parents:
            grads[node] = g
        for parent, vjp in node.parents:
            contrib = np.asarray(vjp(g), dtype=np.float64)
            if contrib.shape != parent.value.shape:
                raise ContractViolation(
                    f"vjp of {node.tag!r} produced shape {contrib.shape}, "
                    f"parent has {parent.value.shape}"
                )
            pid = id(parent)
            if pid in cot:
                cot[pid] = cot[pid] + contrib
            else:
                cot[pid] = contrib
    if params is not None:
        for p in params:
            grads.setdefault(p, np.zeros_like(p.value))
    return GradientReport(grads)


def grad_check(
    f: Callable[[Var], Var],
    point: np.ndarray,
    h: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backward() and central finite differences.

    Checks every coordinate up to d = 256, else `max_coords` random distinct
    coordinates. Relative error uses a floored denominator
    max(|a|, |n|, floor * scale) with scale = max(1, largest checked
    magnitude), so coordinates far below the gradient's scale are compared
    absolutely. The default floor suits float64 evaluation; checks through
    32-bit transports need a floor near 1e-2 (equivalent to the usual
    atol = 1e-5 / rtol = 1e-3 gradcheck recipe), since finite differences
    cannot resolve vanishing coordinates from f32-rounded values.
    """
    point = np.asarray(point, dtype=np.float64)
    x = leaf(point, trainable=True, tag="gradcheck_point")
    out = f(x)
    if not np.isfinite(out.value).all():
        raise ContractViolation("function value non-finite at the check point")
    analytic = backward(out, params=[x]).of(x).ravel()

    d = point.size
    if d <= 256:
        coords = np.arange(d)
    else:
        rng = numerics.SeededRng(seed)
        coords = np.sort(rng.choice(d, size=max(64, min(max_coords, d)), replace=False))

    flat = point.ravel()
    fd = np.empty(coords.size)
    for j, idx in enumerate(coords):
        bumped = flat.copy()
        bumped[idx] = flat[idx] + h
        fp = float(f(constant(bumped.reshape(point.shape))).value)
        bumped[idx] = flat[idx] - h
        fm = float(f(constant(bumped.reshape(point.shape))).value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractViolation("function value non-finite during finite differencing")
        fd[j] = (fp - fm) / (2.0 * h)

    a = analytic[coords]
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(fd).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor * scale)
    return float(np.max(np.abs(a - fd) / denom)) if coords.size else 0.0
