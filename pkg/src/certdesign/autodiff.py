"""Scalar reverse-mode automatic differentiation on a dynamically built tape.

Every program operation records exactly one tape node holding its parent
indices and local partial derivatives; a single reverse sweep then yields
exact gradients. Node payloads are either Python floats or 1-D numpy arrays
carrying independent Monte-Carlo lanes, so the same simulator code can be
differentiated for one rollout or for a whole batch of exogenous samples at
once (lanes never interact except through explicit `lane_sum` reductions).

Constants are plain numbers and never touch the tape; arithmetic between
constants stays constant. The math helpers (`exp`, `sin`, `minimum`,
`where`, ...) dispatch on their argument type, so simulators written against
them also run tape-free on floats or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tape",
    "Dual",
    "DomainError",
    "NumericalError",
    "GradientReport",
    "gradient",
    "check_gradient",
    "value_of",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "tanh",
    "atan2",
    "absval",
    "sign",
    "minimum",
    "maximum",
    "where",
    "lane_sum",
    "dot",
    "m3_eye",
    "m3_t",
    "m3_add",
    "m3_mul",
    "m3_vec",
    "m3_inv",
]


class DomainError(ValueError):
    """Math-domain violation (log/sqrt of a non-positive value)."""

    def __init__(self, op, value):
        self.op = op
        self.value = value
        super().__init__(f"{op} of non-positive value {value!r}")


class NumericalError(ArithmeticError):
    """Non-finite value encountered during a tape sweep."""

    def __init__(self, node_id, kind, detail=""):
        self.node_id = node_id
        self.kind = kind
        super().__init__(
            f"non-finite value at tape node {node_id} (op {kind!r}){detail}"
        )


def _is_finite(v):
    if isinstance(v, np.ndarray):
        return bool(np.isfinite(v).all())
    return math.isfinite(v)


class Tape:
    """Append-only record of scalar operations.

    Parent indices of node i are all < i by construction, so one reversed
    loop over the node list is a valid reverse topological order.
    """

    __slots__ = ("kinds", "parents", "partials", "values", "scalar")

    def __init__(self):
        self.kinds = []
        self.parents = []
        self.partials = []
        self.values = []
        self.scalar = []

    def __len__(self):
        return len(self.kinds)

    def record(self, kind, parents, value, partials):
        """Append one node and return the Dual referring to it."""
        n = len(self.kinds)
        for p in parents:
            if not 0 <= p < n:
                raise IndexError(f"parent id {p} not on tape (size {n})")
        if len(parents) != len(partials):
            raise ValueError("one local partial required per parent")
        self.kinds.append(kind)
        self.parents.append(parents)
        self.partials.append(partials)
        self.values.append(value)
        self.scalar.append(not isinstance(value, np.ndarray))
        return Dual(self, n, value)

    def input(self, value):
        return self.record("input", (), value, ())

    def backward(self, node_id, seed=1.0):
        """Reverse sweep from `node_id`; returns the full adjoint list.

        Each node is visited exactly once. Lane-array contributions flowing
        into a scalar-valued parent are summed over lanes (the parent was
        broadcast on the way forward).
        """
        adj = [0.0] * len(self.kinds)
        adj[node_id] = seed
        parents = self.parents
        partials = self.partials
        scalar = self.scalar
        values = self.values
        for i in range(node_id, -1, -1):
            a = adj[i]
            if isinstance(a, float):
                if a == 0.0:
                    continue
                if not scalar[i]:
                    # a scalar adjoint on a lane-array node means "same in
                    # every lane"; materialize it so reductions into scalar
                    # parents count each lane
                    a = np.full(values[i].shape, a)
            ps = parents[i]
            if not ps:
                continue
            gs = partials[i]
            for k, p in enumerate(ps):
                contrib = a * gs[k]
                if scalar[p] and isinstance(contrib, np.ndarray):
                    contrib = float(contrib.sum())
                adj[p] = adj[p] + contrib
        return adj

    def first_nonfinite(self, adjoints=None):
        """Locate the first node with a non-finite value (or adjoint)."""
        for i, v in enumerate(self.values):
            if not _is_finite(v):
                return i
        if adjoints is not None:
            for i in range(len(adjoints) - 1, -1, -1):
                a = adjoints[i]
                if isinstance(a, (float, np.ndarray)) and not _is_finite(a):
                    return i
        return None


_ONE = (1.0,)
_ONE_ONE = (1.0, 1.0)
_ONE_NEG = (1.0, -1.0)


class Dual:
    """A tape-backed scalar (or lane array) supporting arithmetic operators."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"Dual(node={self.idx}, value={self.value!r})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return self.tape.record(
                "+", (self.idx, other.idx), self.value + other.value, _ONE_ONE
            )
        return self.tape.record("+", (self.idx,), self.value + other, _ONE)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return self.tape.record(
                "-", (self.idx, other.idx), self.value - other.value, _ONE_NEG
            )
        return self.tape.record("-", (self.idx,), self.value - other, _ONE)

    def __rsub__(self, other):
        return self.tape.record("-", (self.idx,), other - self.value, (-1.0,))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return self.tape.record(
                "*",
                (self.idx, other.idx),
                self.value * other.value,
                (other.value, self.value),
            )
        return self.tape.record("*", (self.idx,), self.value * other, (other,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.value
            val = self.value * inv
            return self.tape.record(
                "/", (self.idx, other.idx), val, (inv, -val * inv)
            )
        inv = 1.0 / other
        return self.tape.record("/", (self.idx,), self.value * inv, (inv,))

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        return self.tape.record("/", (self.idx,), val, (-val * inv,))

    def __neg__(self):
        return self.tape.record("neg", (self.idx,), -self.value, (-1.0,))

    def __pow__(self, c):
        if isinstance(c, Dual):
            raise TypeError("power supports constant exponents only")
        v = self.value
        return self.tape.record("pow", (self.idx,), v**c, (c * v ** (c - 1),))

    # comparisons gate `where`; they return plain bools / bool arrays ------

    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)


def value_of(x):
    """Payload of a Dual; plain numbers pass through."""
    return x.value if isinstance(x, Dual) else x


# unary / binary math with type dispatch ------------------------------------


def _np_or_math(v, np_fn, math_fn):
    if isinstance(v, np.ndarray):
        return np_fn(v)
    return math_fn(v)


def exp(x):
    if isinstance(x, Dual):
        v = _np_or_math(x.value, np.exp, math.exp)
        return x.tape.record("exp", (x.idx,), v, (v,))
    return _np_or_math(x, np.exp, math.exp)


def _check_positive(op, v):
    if isinstance(v, np.ndarray):
        if np.any(v <= 0.0):
            raise DomainError(op, float(v.min()))
    elif v <= 0.0:
        raise DomainError(op, float(v))


def log(x):
    v = value_of(x)
    _check_positive("log", v)
    out = _np_or_math(v, np.log, math.log)
    if isinstance(x, Dual):
        return x.tape.record("log", (x.idx,), out, (1.0 / v,))
    return out


def sqrt(x):
    v = value_of(x)
    _check_positive("sqrt", v)
    out = _np_or_math(v, np.sqrt, math.sqrt)
    if isinstance(x, Dual):
        return x.tape.record("sqrt", (x.idx,), out, (0.5 / out,))
    return out


def sin(x):
    if isinstance(x, Dual):
        v = x.value
        return x.tape.record(
            "sin",
            (x.idx,),
            _np_or_math(v, np.sin, math.sin),
            (_np_or_math(v, np.cos, math.cos),),
        )
    return _np_or_math(x, np.sin, math.sin)


def cos(x):
    if isinstance(x, Dual):
        v = x.value
        return x.tape.record(
            "cos",
            (x.idx,),
            _np_or_math(v, np.cos, math.cos),
            (-_np_or_math(v, np.sin, math.sin),),
        )
    return _np_or_math(x, np.cos, math.cos)


def tanh(x):
    if isinstance(x, Dual):
        t = _np_or_math(x.value, np.tanh, math.tanh)
        return x.tape.record("tanh", (x.idx,), t, (1.0 - t * t,))
    return _np_or_math(x, np.tanh, math.tanh)


def atan2(y, x):
    yv = value_of(y)
    xv = value_of(x)
    if isinstance(yv, np.ndarray) or isinstance(xv, np.ndarray):
        out = np.arctan2(yv, xv)
    else:
        out = math.atan2(yv, xv)
    ydual = isinstance(y, Dual)
    xdual = isinstance(x, Dual)
    if not (ydual or xdual):
        return out
    denom = 1.0 / (xv * xv + yv * yv)
    tape = y.tape if ydual else x.tape
    if ydual and xdual:
        return tape.record(
            "atan2", (y.idx, x.idx), out, (xv * denom, -yv * denom)
        )
    if ydual:
        return tape.record("atan2", (y.idx,), out, (xv * denom,))
    return tape.record("atan2", (x.idx,), out, (-yv * denom,))


def sign(v):
    """sign with sign(0) = 0; plain values only (piecewise constant)."""
    if isinstance(v, np.ndarray):
        return np.sign(v)
    return float((v > 0.0) - (v < 0.0))


def absval(x):
    """|x| with subgradient sign(x) at the kink (sign(0) = 0)."""
    if isinstance(x, Dual):
        v = x.value
        return x.tape.record("abs", (x.idx,), abs(v), (sign(v),))
    return abs(x)


def where(cond, a, b):
    """Comparison-gated select; differentiates the selected branch only.

    `cond` is a plain bool or boolean array (typically from comparing Dual
    values), never a Dual itself.
    """
    adual = isinstance(a, Dual)
    bdual = isinstance(b, Dual)
    av = a.value if adual else a
    bv = b.value if bdual else b
    if isinstance(cond, np.ndarray):
        val = np.where(cond, av, bv)
        ga = cond.astype(float)
        gb = 1.0 - ga
    else:
        cond = bool(cond)
        val = av if cond else bv
        if not isinstance(val, np.ndarray):
            val = val + 0.0
        ga = 1.0 if cond else 0.0
        gb = 1.0 - ga
    if adual and bdual:
        return a.tape.record("select", (a.idx, b.idx), val, (ga, gb))
    if adual:
        return a.tape.record("select", (a.idx,), val, (ga,))
    if bdual:
        return b.tape.record("select", (b.idx,), val, (gb,))
    return val


def minimum(a, b):
    """min with subgradient of the selected branch; ties select `a`."""
    return where(value_of(a) <= value_of(b), a, b)


def maximum(a, b):
    """max with subgradient of the selected branch; ties select `a`."""
    return where(value_of(a) >= value_of(b), a, b)


def lane_sum(x):
    """Sum a lane array into one scalar (the cross-sample reduction)."""
    if isinstance(x, Dual):
        v = x.value
        if not isinstance(v, np.ndarray):
            return x
        return x.tape.record("sum", (x.idx,), float(v.sum()), _ONE)
    if isinstance(x, np.ndarray):
        return float(x.sum())
    return x


# vector / 3x3 matrix convenience wrappers over scalar nodes ----------------


def dot(xs, ys):
    acc = xs[0] * ys[0]
    for a, b in zip(xs[1:], ys[1:]):
        acc = acc + a * b
    return acc


def m3_eye():
    return ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def m3_t(a):
    return tuple(tuple(a[i][j] for i in range(3)) for j in range(3))


def m3_add(a, b):
    return tuple(
        tuple(a[i][j] + b[i][j] for j in range(3)) for i in range(3)
    )


def m3_mul(a, b):
    return tuple(
        tuple(
            a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]
            for j in range(3)
        )
        for i in range(3)
    )


def m3_vec(a, v):
    return tuple(
        a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2] for i in range(3)
    )


def m3_inv(a):
    """Closed-form 3x3 inverse via the adjugate."""
    c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1]
    c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2]
    c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0]
    det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02
    inv_det = 1.0 / det
    c10 = a[0][2] * a[2][1] - a[0][1] * a[2][2]
    c11 = a[0][0] * a[2][2] - a[0][2] * a[2][0]
    c12 = a[0][1] * a[2][0] - a[0][0] * a[2][1]
    c20 = a[0][1] * a[1][2] - a[0][2] * a[1][1]
    c21 = a[0][2] * a[1][0] - a[0][0] * a[1][2]
    c22 = a[0][0] * a[1][1] - a[0][1] * a[1][0]
    return (
        (c00 * inv_det, c10 * inv_det, c20 * inv_det),
        (c01 * inv_det, c11 * inv_det, c21 * inv_det),
        (c02 * inv_det, c12 * inv_det, c22 * inv_det),
    )


# gradient drivers -----------------------------------------------------------


def gradient(f, x):
    """Value and gradient of a scalar function via one reverse sweep.

    `f` receives a list of Duals (one per coordinate of `x`) and must return
    a scalar Dual (or a constant, in which case the gradient is zero). Each
    call uses a fresh tape.
    """
    tape = Tape()
    leaves = [tape.input(float(xi)) for xi in x]
    out = f(leaves)
    if not isinstance(out, Dual):
        return float(out), np.zeros(len(leaves))
    if isinstance(out.value, np.ndarray):
        raise ValueError("gradient target must be scalar, got a lane array")
    adj = tape.backward(out.idx)
    grad = np.array([float(adj[leaf.idx]) for leaf in leaves])
    if not (math.isfinite(out.value) and np.isfinite(grad).all()):
        node = tape.first_nonfinite(adj)
        if node is not None:
            raise NumericalError(node, tape.kinds[node])
        raise NumericalError(out.idx, tape.kinds[out.idx], " (gradient)")
    return float(out.value), grad


@dataclass
class GradientReport:
    """Per-coordinate comparison of reverse-mode and central-difference grads."""

    max_rel_error: float
    entries: list  # (index, ad, fd, rel_error)
    tol: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def check_gradient(f, x, fd_step=1e-6, tol=1e-5):
    """Compare gradient(f, x) against 3-point central finite differences."""
    if fd_step <= 0.0:
        raise ValueError("fd_step must be positive")
    x = np.asarray(x, dtype=float)
    _, ad = gradient(f, x)
    entries = []
    max_rel = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += fd_step
        xm[i] -= fd_step
        fd = (float(value_of(f(list(xp)))) - float(value_of(f(list(xm))))) / (
            2.0 * fd_step
        )
        rel = abs(ad[i] - fd) / max(abs(ad[i]), abs(fd), 1e-8)
        entries.append((i, float(ad[i]), fd, rel))
        max_rel = max(max_rel, rel)
    return GradientReport(max_rel_error=max_rel, entries=entries, tol=tol)
