"""Reverse-mode tape with forward-mode time tangents.

Every node on a :class:`Tape` carries a primal value and, optionally, a
tangent: the directional derivative of that value with respect to a seeded
scalar (the network time input, or a state coordinate when building
Jacobians).  Forward rules compute both components in one pass; the reverse
sweep differentiates the (value, tangent) pair jointly, so gradients of
expressions that *contain* tangents (e.g. d/dt of a network output) come out
exact, including the mixed second-order terms.

Node values are float64 scalars or numpy arrays.  Elementwise ops broadcast,
which lets a single tape evaluate a whole batch of collocation points at
once; the graph is identical at every point, so the batched tape is
equivalent to one private tape per point.

Leaves default to differentiable variables; data lifted implicitly into an
expression is marked constant, and adjoint work for subgraphs that cannot
reach a variable is skipped.

Ops outside the elementary set (matmul, stack, norms, ...) exist as
structural plumbing for batching and matrix assembly; they add no new
mathematical primitives.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Tape", "Var", "DualScalar", "GradientStore", "backward", "jacobian",
    "sin", "cos", "tanh", "exp", "log", "sqrt", "powc", "dense_tanh",
    "matmul", "stack", "vsum", "norm2", "fro_norm", "reshape", "getitem",
    "transpose_last2", "diag_last2", "triu_matrix", "inv",
    "with_tangent", "stop_tangent", "tangent_of", "value_of",
]

_TINY = 1e-300  # guards the subgradient of a vector norm at the origin


def _as_value(x):
    if isinstance(x, (float, int)):
        return float(x)
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def _match_tan(tan, shape):
    """Broadcast a tangent up to the owning node's value shape.

    Tangents wider than the value (a batch of seed directions in the last
    axis) are kept as-is; elementwise rules broadcast against them.
    """
    tshape = np.shape(tan)
    if tshape == shape:
        return tan
    if shape == ():
        return tan if tshape else float(tan)
    try:
        out = np.broadcast_shapes(tshape, shape)
    except ValueError:
        return tan
    if out == shape:
        return np.broadcast_to(np.asarray(tan), shape)
    return tan


def _unbc(g, shape):
    """Sum gradient ``g`` over axes that were broadcast against ``shape``."""
    if np.shape(g) == shape:
        return g
    if shape == ():
        return float(np.sum(g))
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class DualScalar:
    """A (value, tangent) pair; the tangent of a constant is exactly 0."""

    __slots__ = ("value", "tangent")

    def __init__(self, value, tangent=None):
        self.value = value
        self.tangent = tangent if tangent is not None else (
            np.zeros(np.shape(value)) if np.shape(value) else 0.0)

    def __repr__(self):
        return f"DualScalar(value={self.value!r}, tangent={self.tangent!r})"


class Tape:
    """Ordered list of operations; node ids are topologically sorted.

    Cycles are impossible by construction: an op may only reference ids
    already on the tape.
    """

    __slots__ = ("vals", "tans", "backs", "needs")

    def __init__(self):
        self.vals: list = []
        self.tans: list = []   # None when the tangent is structurally zero
        self.backs: list = []  # None for leaves and constant subgraphs
        self.needs: list = []  # False when no variable is reachable

    def __len__(self):
        return len(self.vals)

    def _push(self, value, tangent, back, needs: bool) -> "Var":
        self.vals.append(value)
        self.tans.append(tangent)
        self.backs.append(back if needs else None)
        self.needs.append(needs)
        return Var(self, len(self.vals) - 1)

    def leaf(self, value, tangent=None, const: bool = False) -> "Var":
        """Append an input node; constants are excluded from adjoint work."""
        val = _as_value(value)
        tan = None if tangent is None else _match_tan(_as_value(tangent), np.shape(val))
        return self._push(val, tan, None, not const)

    def record(self, op_kind: str, inputs: Sequence) -> "Var":
        """Append a node by op name; primal and tangent follow forward rules."""
        try:
            fn = _OP_TABLE[op_kind]
        except KeyError:
            raise ConfigError(f"unknown op kind {op_kind!r}") from None
        args = [x if isinstance(x, Var) else self.leaf(x) for x in inputs]
        return fn(*args)


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "i")

    # defer mixed numpy expressions (ndarray op Var) to the reflected
    # operators instead of numpy object-array semantics
    __array_ufunc__ = None

    def __init__(self, tape: Tape, i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self):
        return self.tape.vals[self.i]

    @property
    def tangent(self):
        t = self.tape.tans[self.i]
        if t is None:
            v = self.tape.vals[self.i]
            return np.zeros(np.shape(v)) if np.shape(v) else 0.0
        return t

    @property
    def primal(self) -> DualScalar:
        return DualScalar(self.value, self.tape.tans[self.i])

    def __repr__(self):
        return f"Var(i={self.i}, value={self.value!r})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_lift(self.tape, o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(_lift(self.tape, o), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ConfigError("operands belong to different tapes")
        return x
    return tape.leaf(x, const=True)


def _pair(a, b):
    if isinstance(a, Var):
        return a, _lift(a.tape, b)
    return _lift(b.tape, a), b


def value_of(x):
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    t = a.tape
    av, bv = t.vals[a.i], t.vals[b.i]
    at_, bt_ = t.tans[a.i], t.tans[b.i]
    cv_out = av + bv
    if at_ is None:
        tan = None if bt_ is None else bt_
    else:
        tan = at_ if bt_ is None else at_ + bt_
    if tan is not None:
        tan = _match_tan(tan, np.shape(cv_out))
    ai, bi, ash, bsh = a.i, b.i, np.shape(av), np.shape(bv)
    atsh, btsh = np.shape(at_) if at_ is not None else None, \
        np.shape(bt_) if bt_ is not None else None
    na, nb = t.needs[a.i], t.needs[b.i]

    def back(cv, ct, addv, addt):
        if cv is not None:
            if na:
                addv(ai, _unbc(cv, ash))
            if nb:
                addv(bi, _unbc(cv, bsh))
        if ct is not None:
            if na and atsh is not None:
                addt(ai, _unbc(ct, atsh))
            if nb and btsh is not None:
                addt(bi, _unbc(ct, btsh))

    return t._push(cv_out, tan, back, na or nb)


def sub(a, b):
    a, b = _pair(a, b)
    t = a.tape
    av, bv = t.vals[a.i], t.vals[b.i]
    at_, bt_ = t.tans[a.i], t.tans[b.i]
    cv_out = av - bv
    if at_ is None:
        tan = None if bt_ is None else -bt_
    else:
        tan = at_ if bt_ is None else at_ - bt_
    if tan is not None:
        tan = _match_tan(tan, np.shape(cv_out))
    ai, bi, ash, bsh = a.i, b.i, np.shape(av), np.shape(bv)
    atsh, btsh = np.shape(at_) if at_ is not None else None, \
        np.shape(bt_) if bt_ is not None else None
    na, nb = t.needs[a.i], t.needs[b.i]

    def back(cv, ct, addv, addt):
        if cv is not None:
            if na:
                addv(ai, _unbc(cv, ash))
            if nb:
                addv(bi, _unbc(-cv, bsh))
        if ct is not None:
            if na and atsh is not None:
                addt(ai, _unbc(ct, atsh))
            if nb and btsh is not None:
                addt(bi, _unbc(-ct, btsh))

    return t._push(cv_out, tan, back, na or nb)


def mul(a, b):
    a, b = _pair(a, b)
    t = a.tape
    av, bv = t.vals[a.i], t.vals[b.i]
    at_, bt_ = t.tans[a.i], t.tans[b.i]
    if at_ is None and bt_ is None:
        tan = None
    elif bt_ is None:
        tan = at_ * bv
    elif at_ is None:
        tan = av * bt_
    else:
        tan = at_ * bv + av * bt_
    ai, bi, ash, bsh = a.i, b.i, np.shape(av), np.shape(bv)
    atsh, btsh = np.shape(at_) if at_ is not None else None, \
        np.shape(bt_) if bt_ is not None else None
    na, nb = t.needs[a.i], t.needs[b.i]

    def back(cv, ct, addv, addt):
        if cv is not None:
            if na:
                addv(ai, _unbc(cv * bv, ash))
            if nb:
                addv(bi, _unbc(cv * av, bsh))
        if ct is not None:
            # d(c.t)/d(a.v) = b.t ; d(c.t)/d(b.v) = a.t
            if na and bt_ is not None:
                addv(ai, _unbc(ct * bt_, ash))
            if nb and at_ is not None:
                addv(bi, _unbc(ct * at_, bsh))
            if na and atsh is not None:
                addt(ai, _unbc(ct * bv, atsh))
            if nb and btsh is not None:
                addt(bi, _unbc(ct * av, btsh))

    return t._push(av * bv, tan, back, na or nb)


def div(a, b):
    a, b = _pair(a, b)
    t = a.tape
    av, bv = t.vals[a.i], t.vals[b.i]
    at_, bt_ = t.tans[a.i], t.tans[b.i]
    binv = 1.0 / bv
    cv_out = av * binv
    if at_ is None and bt_ is None:
        tan = None
    elif bt_ is None:
        tan = at_ * binv
    elif at_ is None:
        tan = -cv_out * binv * bt_
    else:
        tan = at_ * binv - cv_out * binv * bt_
    ai, bi, ash, bsh = a.i, b.i, np.shape(av), np.shape(bv)
    atsh, btsh = np.shape(at_) if at_ is not None else None, \
        np.shape(bt_) if bt_ is not None else None
    na, nb = t.needs[a.i], t.needs[b.i]

    def back(cv, ct, addv, addt):
        if cv is not None:
            if na:
                addv(ai, _unbc(cv * binv, ash))
            if nb:
                addv(bi, _unbc(-cv * cv_out * binv, bsh))
        if ct is not None:
            # c.t = a.t/b - a*b.t/b^2
            if na and bt_ is not None:
                addv(ai, _unbc(-ct * bt_ * binv * binv, ash))
            if nb and (at_ is not None or bt_ is not None):
                gb = 0.0
                if at_ is not None:
                    gb = gb + (-at_ * binv * binv)
                if bt_ is not None:
                    gb = gb + 2.0 * av * bt_ * binv * binv * binv
                addv(bi, _unbc(ct * gb, bsh))
            if na and atsh is not None:
                addt(ai, _unbc(ct * binv, atsh))
            if nb and btsh is not None:
                addt(bi, _unbc(-ct * cv_out * binv, btsh))

    return t._push(cv_out, tan, back, na or nb)


def neg(a: Var):
    t = a.tape
    av, at_ = t.vals[a.i], t.tans[a.i]
    ai = a.i
    na = t.needs[a.i]

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(ai, -cv)
        if ct is not None and at_ is not None:
            addt(ai, -ct)

    return t._push(-av, None if at_ is None else -at_, back, na)


def _unary(np_f, math_f, d1, d2):
    """Build a unary elementwise op from value/derivative rules.

    d1(x, y) is f'(x) given y = f(x); d2(x, y, d1v) is f''(x).
    """

    def op(x):
        if not isinstance(x, Var):
            return math_f(x) if isinstance(x, (float, int)) else np_f(x)
        t = x.tape
        xv, xt = t.vals[x.i], t.tans[x.i]
        yv = np_f(xv)
        d1v = d1(xv, yv)
        xi = x.i
        nx = t.needs[x.i]
        if xt is None:
            def back(cv, ct, addv, addt):
                if cv is not None:
                    addv(xi, cv * d1v)
            return t._push(yv, None, back, nx)
        d2v = d2(xv, yv, d1v)
        xsh, xtsh = np.shape(xv), np.shape(xt)

        def back(cv, ct, addv, addt):
            if cv is not None:
                addv(xi, cv * d1v)
            if ct is not None:
                addv(xi, _unbc(ct * d2v * xt, xsh))
                addt(xi, _unbc(ct * d1v, xtsh))

        return t._push(yv, d1v * xt, back, nx)

    return op


sin = _unary(np.sin, math.sin, lambda x, y: np.cos(x), lambda x, y, d: -y)
cos = _unary(np.cos, math.cos, lambda x, y: -np.sin(x), lambda x, y, d: -y)
tanh = _unary(np.tanh, math.tanh,
              lambda x, y: 1.0 - y * y,
              lambda x, y, d: -2.0 * y * d)
exp = _unary(np.exp, math.exp, lambda x, y: y, lambda x, y, d: y)
log = _unary(np.log, math.log, lambda x, y: 1.0 / x, lambda x, y, d: -1.0 / (x * x))
sqrt = _unary(np.sqrt, math.sqrt,
              lambda x, y: 0.5 / y,
              lambda x, y, d: -0.25 / (y * y * y))


def powc(x, p):
    """x raised to a constant exponent."""
    if not isinstance(p, (float, int)):
        raise ConfigError("powc exponent must be a numeric constant")
    p = float(p)
    if not isinstance(x, Var):
        return x ** p
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    yv = xv ** p
    d1v = p * xv ** (p - 1.0)
    xi = x.i
    nx = t.needs[x.i]
    if xt is None:
        def back(cv, ct, addv, addt):
            if cv is not None:
                addv(xi, cv * d1v)
        return t._push(yv, None, back, nx)
    d2v = p * (p - 1.0) * xv ** (p - 2.0)
    xsh, xtsh = np.shape(xv), np.shape(xt)

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, cv * d1v)
        if ct is not None:
            addv(xi, _unbc(ct * d2v * xt, xsh))
            addt(xi, _unbc(ct * d1v, xtsh))

    return t._push(yv, d1v * xt, back, nx)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def _T(x):
    return np.swapaxes(x, -1, -2)


def _mm(x, y):
    """np.matmul with a flattening fast path for (..., k, m) @ (m, p)."""
    if x.ndim > 2 and y.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(lead + (y.shape[-1],))
    return np.matmul(x, y)


def matmul(a, b):
    """Matrix product; both operands must have ndim >= 2 (batch dims broadcast)."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _mm(np.asarray(a), np.asarray(b))
    a, b = _pair(a, b)
    t = a.tape
    av, bv = t.vals[a.i], t.vals[b.i]
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ConfigError("matmul operands must have ndim >= 2")
    at_, bt_ = t.tans[a.i], t.tans[b.i]
    cv_out = _mm(av, bv)
    tan = None
    if at_ is not None:
        tan = _mm(at_, bv)
    if bt_ is not None:
        tb = _mm(av, bt_)
        tan = tb if tan is None else tan + tb
    ai, bi, ash, bsh = a.i, b.i, np.shape(av), np.shape(bv)
    na, nb = t.needs[a.i], t.needs[b.i]
    bvT, avT = _T(bv), _T(av)

    def back(cv, ct, addv, addt):
        if cv is not None:
            if na:
                addv(ai, _unbc(_mm(cv, bvT), ash))
            if nb:
                addv(bi, _unbc(np.matmul(avT, cv), bsh))
        if ct is not None:
            if na and bt_ is not None:
                addv(ai, _unbc(_mm(ct, _T(bt_)), ash))
            if nb and at_ is not None:
                addv(bi, _unbc(np.matmul(_T(at_), ct), bsh))
            if na and at_ is not None:
                addt(ai, _unbc(_mm(ct, bvT), ash))
            if nb and bt_ is not None:
                addt(bi, _unbc(np.matmul(avT, ct), bsh))

    return t._push(cv_out, tan, back, na or nb)


def dense_tanh(x, w, b):
    """Fused affine + tanh layer: tanh(x @ w + b) with dual support.

    One node instead of three keeps the hot training path short; the rules
    are the exact composition of matmul, add, and tanh.
    """
    if not isinstance(x, Var):
        raise ConfigError("dense_tanh expects the input on a tape")
    t = x.tape
    w = _lift(t, w)
    b = _lift(t, b)
    xv, xt = t.vals[x.i], t.tans[x.i]
    wv, bv = t.vals[w.i], t.vals[b.i]
    if t.tans[w.i] is not None or t.tans[b.i] is not None:
        raise ConfigError("dense_tanh weights must be tangent-free")
    if np.ndim(xv) != 2 or np.ndim(wv) != 2 or np.ndim(bv) != 1:
        raise ConfigError("dense_tanh expects x (N,in), w (in,out), b (out,)")
    yv = np.tanh(xv @ wv + bv)
    s = 1.0 - yv * yv
    zt = None if xt is None else xt @ wv
    tan = None if zt is None else s * zt
    xi, wi, bi = x.i, w.i, b.i
    nx, nw, nb_ = t.needs[x.i], t.needs[w.i], t.needs[b.i]
    wvT, xvT = wv.T, xv.T

    def back(cv, ct, addv, addt):
        dz = None
        if cv is not None:
            dz = cv * s
        if ct is not None:
            cts = ct * s
            dz2 = ct * (-2.0 * yv * s) * zt
            dz = dz2 if dz is None else dz + dz2
            if nx:
                addt(xi, cts @ wvT)
            if nw and xt is not None:
                addv(wi, xt.T @ cts)
        if dz is not None:
            if nx:
                addv(xi, dz @ wvT)
            if nw:
                addv(wi, xvT @ dz)
            if nb_:
                addv(bi, dz.sum(axis=0))

    return t._push(yv, tan, back, nx or nw or nb_)


def stack(xs: Sequence, axis: int = -1):
    """Stack scalars/arrays along a new axis; constants broadcast to match."""
    tape = None
    for x in xs:
        if isinstance(x, Var):
            tape = x.tape
            break
    if tape is None:
        return np.stack([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    vs = [x if isinstance(x, Var) else tape.leaf(x, const=True) for x in xs]
    shapes = [np.shape(tape.vals[v.i]) for v in vs]
    common = np.broadcast_shapes(*shapes)
    vals = [np.broadcast_to(np.asarray(tape.vals[v.i]), common) for v in vs]
    cv_out = np.stack(vals, axis=axis)
    any_tan = any(tape.tans[v.i] is not None for v in vs)
    tan = None
    if any_tan:
        tans = [np.broadcast_to(np.asarray(tape.tans[v.i]) if tape.tans[v.i] is not None
                                else np.zeros(()), common) for v in vs]
        tan = np.stack(tans, axis=axis)
    ids = [v.i for v in vs]
    has = [tape.tans[v.i] is not None for v in vs]
    needs = [tape.needs[v.i] for v in vs]

    def back(cv, ct, addv, addt):
        if cv is not None:
            for j, (idx, sh) in enumerate(zip(ids, shapes)):
                if needs[j]:
                    addv(idx, _unbc(np.take(cv, j, axis=axis), sh))
        if ct is not None:
            for j, (idx, sh) in enumerate(zip(ids, shapes)):
                if needs[j] and has[j]:
                    addt(idx, _unbc(np.take(ct, j, axis=axis), sh))

    return tape._push(cv_out, tan, back, any(needs))


def vsum(x, axis=None):
    """Sum of entries along ``axis`` (all entries when None)."""
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    cv_out = np.sum(xv, axis=axis)
    tan = None if xt is None else np.sum(xt, axis=axis)
    xi, sh = x.i, np.shape(xv)

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, sh)
        return np.broadcast_to(np.expand_dims(np.asarray(g), axis), sh)

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, expand(cv))
        if ct is not None and xt is not None:
            addt(xi, expand(ct))

    return t._push(cv_out, tan, back, t.needs[x.i])


def norm2(x, axis=-1):
    """Euclidean norm along ``axis`` (tuple axis gives the Frobenius norm).

    The gradient at the origin is the zero subgradient.
    """
    if not isinstance(x, Var):
        return np.sqrt(np.sum(np.asarray(x) ** 2, axis=axis))
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    nv = np.sqrt(np.sum(xv * xv, axis=axis))
    safe = np.maximum(nv, _TINY)
    tan = None if xt is None else np.sum(xv * xt, axis=axis) / safe
    xi = x.i

    def expand(g):
        return np.expand_dims(np.asarray(g), axis)

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, expand(cv / safe) * xv)
        if ct is not None and xt is not None:
            # d(n.t)/dx.v; n.t = sum(x*xt)/n
            s = np.sum(xv * xt, axis=axis)
            addv(xi, expand(ct / safe) * xt - expand(ct * s / (safe ** 3)) * xv)
            addt(xi, expand(ct / safe) * xv)

    return t._push(nv, tan, back, t.needs[x.i])


def fro_norm(x):
    """Frobenius norm over the last two axes."""
    return norm2(x, axis=(-2, -1))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    xi, sh = x.i, np.shape(xv)

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, np.reshape(cv, sh))
        if ct is not None and xt is not None:
            addt(xi, np.reshape(ct, sh))

    return t._push(np.reshape(xv, shape), None if xt is None else np.reshape(xt, shape),
                   back, t.needs[x.i])


def getitem(x, key):
    """Basic (non-fancy) indexing; adjoint scatters back into a zero array."""
    if not isinstance(x, Var):
        return np.asarray(x)[key]
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    xi, sh = x.i, np.shape(xv)

    def back(cv, ct, addv, addt):
        if cv is not None:
            g = np.zeros(sh)
            g[key] = cv
            addv(xi, g)
        if ct is not None and xt is not None:
            g = np.zeros(sh)
            g[key] = ct
            addt(xi, g)

    return t._push(xv[key], None if xt is None else xt[key], back, t.needs[x.i])


def transpose_last2(x):
    if not isinstance(x, Var):
        return _T(np.asarray(x))
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    xi = x.i

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, _T(cv))
        if ct is not None and xt is not None:
            addt(xi, _T(ct))

    return t._push(_T(xv), None if xt is None else _T(xt), back, t.needs[x.i])


def diag_last2(x):
    """Diagonal of the trailing square matrix axes: (..., n, n) -> (..., n)."""
    if not isinstance(x, Var):
        return np.diagonal(np.asarray(x), axis1=-2, axis2=-1).copy()
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    xi, sh = x.i, np.shape(xv)
    n = sh[-1]
    rng = np.arange(n)

    def scatter(g):
        out = np.zeros(sh)
        out[..., rng, rng] = g
        return out

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, scatter(cv))
        if ct is not None and xt is not None:
            addt(xi, scatter(ct))

    fwd = np.diagonal(xv, axis1=-2, axis2=-1).copy()
    tan = None if xt is None else np.diagonal(xt, axis1=-2, axis2=-1).copy()
    return t._push(fwd, tan, back, t.needs[x.i])


def triu_matrix(raw, n: int):
    """Fill an upper-triangular (..., n, n) matrix row-major from (..., k) entries."""
    k = (n + 1) * n // 2
    rows, cols = np.triu_indices(n)
    if not isinstance(raw, Var):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != k:
            raise ConfigError(f"triangular fill needs {k} entries for n={n}, got {raw.shape[-1]}")
        out = np.zeros(raw.shape[:-1] + (n, n))
        out[..., rows, cols] = raw
        return out
    t = raw.tape
    rv, rt = t.vals[raw.i], t.tans[raw.i]
    if np.shape(rv)[-1] != k:
        raise ConfigError(f"triangular fill needs {k} entries for n={n}, got {np.shape(rv)[-1]}")
    ri = raw.i

    def fill(v):
        out = np.zeros(np.shape(v)[:-1] + (n, n))
        out[..., rows, cols] = v
        return out

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(ri, np.asarray(cv)[..., rows, cols])
        if ct is not None and rt is not None:
            addt(ri, np.asarray(ct)[..., rows, cols])

    return t._push(fill(rv), None if rt is None else fill(rt), back, t.needs[raw.i])


def inv(x):
    """Inverse of the trailing square matrix axes."""
    if not isinstance(x, Var):
        return np.linalg.inv(np.asarray(x))
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    try:
        iv = np.linalg.inv(xv)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"matrix inversion failed: {e}") from None
    xi = x.i
    tan = None if xt is None else -np.matmul(iv, np.matmul(xt, iv))

    def back(cv, ct, addv, addt):
        ivT = _T(iv)
        if cv is not None:
            addv(xi, -np.matmul(ivT, np.matmul(cv, ivT)))
        if ct is not None and xt is not None:
            # c = inv(x); c.t = -c x.t c
            g = np.matmul(ivT, np.matmul(ct, ivT))
            addv(xi, np.matmul(_T(tan), np.matmul(ct, ivT))
                 + np.matmul(ivT, np.matmul(ct, _T(tan))))
            addt(xi, -g)

    return t._push(iv, tan, back, t.needs[x.i])


def with_tangent(x, tangent):
    """Same value as ``x`` but with the tangent replaced (None clears it)."""
    if not isinstance(x, Var):
        raise ConfigError("with_tangent requires a tape node")
    t = x.tape
    xv = t.vals[x.i]
    xi = x.i
    tan = None if tangent is None else _match_tan(_as_value(tangent), np.shape(xv))

    def back(cv, ct, addv, addt):
        if cv is not None:
            addv(xi, cv)
        # the new tangent is a constant seed: no adjoint flows through it

    return t._push(xv, tan, back, t.needs[x.i])


def stop_tangent(x):
    """Drop the tangent; the value path stays differentiable."""
    return with_tangent(x, None)


def tangent_of(x):
    """The tangent of ``x`` as a first-class value node."""
    if not isinstance(x, Var):
        raise ConfigError("tangent_of requires a tape node")
    t = x.tape
    xv, xt = t.vals[x.i], t.tans[x.i]
    if xt is None:
        # tangent of a constant is exactly zero
        zero = np.zeros(np.shape(xv)) if np.shape(xv) else 0.0
        return t.leaf(zero, const=True)
    xi = x.i

    def back(cv, ct, addv, addt):
        if cv is not None:
            addt(xi, cv)

    return t._push(xt, None, back, t.needs[x.i])


_OP_TABLE: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "sin": sin, "cos": cos, "tanh": tanh, "exp": exp, "log": log,
    "sqrt": sqrt,
}


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

class GradientStore:
    """Adjoints from one backward sweep; unreached variables read as 0."""

    __slots__ = ("_tape", "_av", "_at")

    def __init__(self, tape, av, at):
        self._tape = tape
        self._av = av
        self._at = at

    def grad(self, x: Var):
        g = self._av[x.i]
        if g is None:
            v = self._tape.vals[x.i]
            return np.zeros(np.shape(v)) if np.shape(v) else 0.0
        return g

    def tangent_grad(self, x: Var):
        g = self._at[x.i]
        if g is None:
            v = self._tape.vals[x.i]
            return np.zeros(np.shape(v)) if np.shape(v) else 0.0
        return g

    def __getitem__(self, x: Var):
        return self.grad(x)


def backward(tape: Tape, output: Var) -> GradientStore:
    """Reverse sweep from a scalar output; visits each node exactly once."""
    out_val = tape.vals[output.i]
    if np.shape(out_val):
        raise ConfigError("backward output must be a scalar node")
    n = len(tape.vals)
    av: list = [None] * n
    at: list = [None] * n
    av[output.i] = 1.0
    tans = tape.tans

    def addv(i, g):
        cur = av[i]
        av[i] = g if cur is None else cur + g

    def addt(i, g):
        if tans[i] is None:
            return
        cur = at[i]
        at[i] = g if cur is None else cur + g

    backs = tape.backs
    for i in range(output.i, -1, -1):
        b = backs[i]
        if b is None:
            continue
        avi = av[i]
        ati = at[i]
        if avi is None and ati is None:
            continue
        b(avi, ati, addv, addt)
    return GradientStore(tape, av, at)


def jacobian(func, at) -> np.ndarray:
    """Full Jacobian of a vector function at a point.

    ``func`` maps a list of scalar nodes to a node or list of nodes; row i of
    the result is the gradient of output i.
    """
    at = np.asarray(at, dtype=np.float64)
    tape = Tape()
    xs = [tape.leaf(float(v)) for v in at]
    out = func(xs)
    outs = [out] if isinstance(out, Var) else list(out)
    rows = []
    for o in outs:
        o = o if isinstance(o, Var) else tape.leaf(o, const=True)
        store = backward(tape, o)
        rows.append([float(store.grad(x)) for x in xs])
    jac = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(jac)):
        bad = [tuple(int(v) for v in ix) for ix in np.argwhere(~np.isfinite(jac))]
        raise NumericalError(f"non-finite jacobian entries at {bad}")
    return jac
