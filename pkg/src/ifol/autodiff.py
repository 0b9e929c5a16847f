"""Reverse-mode tape over numpy arrays with forward-over-reverse Hessian products.

Values flowing through a :class:`Tape` may be plain arrays or :class:`Dual`
pairs. Replaying a function with Dual-valued leaves and running the usual
reverse sweep in Dual arithmetic yields gradient *and* Hessian-vector product
in one pass::

    >>> value, g = grad(lambda x: sum(x * x), np.array([3.0]))
    >>> hvp(lambda x: sum(x * x * x * x), np.array([2.0]), np.array([1.0]))
    array([48.])
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Dual", "Tape", "Var", "EvaluationError",
    "add", "sub", "mul", "div", "neg", "power", "square", "sin", "cos", "exp", "log",
    "sum", "matmul", "dot", "matvec", "einsum", "linear", "gather", "reshape",
    "where", "stop_gradient", "primal", "transpose", "sine_layer",
    "grad", "grad_and_hvp", "hvp", "unrolled_grad", "Unrolled",
]


class EvaluationError(FloatingPointError):
    """Non-finite value produced while recording a function."""


# ---------------------------------------------------------------------------
# Dual numbers (value, tangent) with numpy-array payloads
# ---------------------------------------------------------------------------

class Dual:
    """Forward-mode pair. ``value`` and ``tangent`` share a shape."""

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None  # ndarray op Dual -> defer to Dual's reflected method

    def __init__(self, value, tangent=None):
        self.value = _floating(value)
        self.tangent = np.zeros_like(self.value) if tangent is None else _floating(tangent)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return Dual(self.value.T, self.tangent.T)

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.value + o.value, self.tangent + o.tangent)
        return Dual(self.value + o, np.broadcast_to(self.tangent, np.broadcast_shapes(self.value.shape, np.shape(o))))

    __radd__ = __add__

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.value * o.value, self.tangent * o.value + self.value * o.tangent)
        return Dual(self.value * o, self.tangent * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.value / o.value
            return Dual(q, (self.tangent - q * o.tangent) / o.value)
        return Dual(self.value / o, self.tangent / o)

    def __rtruediv__(self, o):
        q = o / self.value
        return Dual(q, -q * self.tangent / self.value)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("Dual exponent not supported")
        dp = _ipow(self.value, p - 1)
        return Dual(dp * self.value, p * dp * self.tangent)

    def __matmul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.value @ o.value, self.tangent @ o.value + self.value @ o.tangent)
        return Dual(self.value @ o, self.tangent @ o)

    def __rmatmul__(self, o):
        return Dual(o @ self.value, o @ self.tangent)

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.tangent[idx])

    def reshape(self, *shape):
        return Dual(self.value.reshape(*shape), self.tangent.reshape(*shape))

    def swapaxes(self, a, b):
        return Dual(self.value.swapaxes(a, b), self.tangent.swapaxes(a, b))

    def sum(self, axis=None, keepdims=False):
        return Dual(self.value.sum(axis=axis, keepdims=keepdims), self.tangent.sum(axis=axis, keepdims=keepdims))


def _ipow(x, p):
    """``x ** p``; small non-negative integer powers by repeated products (much faster)."""
    if float(p).is_integer() and 0 <= p <= 4:
        p = int(p)
        if p == 0:
            return np.ones_like(x)
        out = x
        for _ in range(p - 1):
            out = out * x
        return out
    return x ** p


def _floating(x):
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(float)


def _is_dual(x) -> bool:
    return isinstance(x, Dual)


def _primal(x):
    return x.value if isinstance(x, Dual) else x


def _sin_cos(x):
    if _is_dual(x):
        s, c = np.sin(x.value), np.cos(x.value)
        return Dual(s, x.tangent * c), Dual(c, -x.tangent * s)
    return np.sin(x), np.cos(x)


def _exp(x):
    if _is_dual(x):
        e = np.exp(x.value)
        return Dual(e, e * x.tangent)
    return np.exp(x)


def _log(x):
    if _is_dual(x):
        return Dual(np.log(x.value), x.tangent / x.value)
    return np.log(x)


def _sum(x, axis=None, keepdims=False):
    if _is_dual(x):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def _reshape(x, shape):
    return x.reshape(shape)


def _broadcast_to(x, shape):
    if _is_dual(x):
        return Dual(np.broadcast_to(x.value, shape), np.broadcast_to(x.tangent, shape))
    return np.broadcast_to(x, shape)


def _einsum(spec, a, b):
    if _is_dual(a) and _is_dual(b):
        return Dual(np.einsum(spec, a.value, b.value, optimize=True),
                    np.einsum(spec, a.tangent, b.value, optimize=True)
                    + np.einsum(spec, a.value, b.tangent, optimize=True))
    if _is_dual(a):
        return Dual(np.einsum(spec, a.value, b, optimize=True), np.einsum(spec, a.tangent, b, optimize=True))
    if _is_dual(b):
        return Dual(np.einsum(spec, a, b.value, optimize=True), np.einsum(spec, a, b.tangent, optimize=True))
    return np.einsum(spec, a, b, optimize=True)


def _apply_linear(A, x):
    """``y[..., i] = sum_j A[i, j] x[..., j]`` for dense or sparse constant ``A``."""
    if _is_dual(x):
        return Dual(_apply_linear(A, x.value), _apply_linear(A, x.tangent))
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    out = (A @ flat.T).T
    return np.asarray(out).reshape(*lead, A.shape[0])


def _where(mask, a, b):
    if _is_dual(a) or _is_dual(b):
        a, b = _as_dual(a), _as_dual(b)
        return Dual(np.where(mask, a.value, b.value), np.where(mask, a.tangent, b.tangent))
    return np.where(mask, a, b)


def _as_dual(x):
    return x if _is_dual(x) else Dual(x)


def _zeros(shape):
    return np.zeros(shape)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    gshape = np.shape(_primal(g))
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = _sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and np.shape(_primal(g))[i] != 1)
    if axes:
        g = _sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    @property
    def shape(self):
        return np.shape(_primal(self.value))

    @property
    def ndim(self):
        return len(self.shape)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis=axis)


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in evaluation order, so the list is already a
    topological order and one backward pass over it visits every node once.
    """

    def __init__(self):
        self.values: list = []
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []

    def __len__(self):
        return len(self.values)

    def leaf(self, value) -> Var:
        return self._push(value, "leaf", (), None)

    def _push(self, value, op, parents, vjp) -> Var:
        self.values.append(value)
        self.ops.append(op)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1, value)

    def first_nonfinite(self) -> int | None:
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(_primal(v))):
                return i
        return None

    def backward(self, out: Var, seed=None) -> list:
        """Adjoints of every node with respect to ``out`` (None where unreached)."""
        adj: list = [None] * len(self.values)
        adj[out.index] = np.ones(out.shape) if seed is None else seed
        for i in range(out.index, -1, -1):
            g = adj[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def _record(op, value, inputs, vjp):
    """Push a node; ``vjp(g)`` returns one gradient per entry of ``inputs``."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    idx = [x.index for x in inputs if isinstance(x, Var)]
    mask = [isinstance(x, Var) for x in inputs]

    def vjp_vars(g):
        gs = vjp(g)
        return tuple(gi for gi, m in zip(gs, mask) if m)

    return tape._push(value, op, tuple(idx), vjp_vars)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa) if isinstance(a, Var) else None,
                                                  _unbroadcast(g, sb) if isinstance(b, Var) else None))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa) if isinstance(a, Var) else None,
                                                  -_unbroadcast(g, sb) if isinstance(b, Var) else None))


def neg(a):
    return _record("neg", -_val(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bv, sa) if isinstance(a, Var) else None,
                              _unbroadcast(g * av, sb) if isinstance(b, Var) else None))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, sa) if isinstance(a, Var) else None,
                              _unbroadcast(-g * out / bv, sb) if isinstance(b, Var) else None))


def power(a, p: float):
    """``a ** p`` for a constant exponent."""
    av = _val(a)
    dp = _ipow(av, p - 1)
    out = dp * av
    return _record("power", out, (a,), lambda g: (p * g * dp,))


def square(a):
    return power(a, 2)


def sin(a):
    s, c = _sin_cos(_val(a))
    return _record("sin", s, (a,), lambda g: (g * c,))


def cos(a):
    s, c = _sin_cos(_val(a))
    return _record("cos", c, (a,), lambda g: (-(g * s),))


def exp(a):
    e = _exp(_val(a))
    return _record("exp", e, (a,), lambda g: (g * e,))


def log(a):
    av = _val(a)
    return _record("log", _log(av), (a,), lambda g: (g / av,))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    av = _val(a)
    shape = np.shape(_primal(av))
    out = _sum(av, axis=axis)

    def vjp(g):
        if axis is None:
            return (_broadcast_to(g, shape),)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        kept = [1 if i in axes else n for i, n in enumerate(shape)]
        return (_broadcast_to(_reshape(g, kept), shape),)

    return _record("sum", out, (a,), vjp)


def matmul(a, b):
    """Batched matrix product; either operand may be 1-D."""
    av, bv = _val(a), _val(b)
    out = av @ bv
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))

    def vjp(g):
        if len(sa) == 1 and len(sb) == 1:
            return g * bv, g * av
        if len(sb) == 1:
            ga = _einsum("...i,j->...ij", g, bv)
            gb = _sum(_einsum("...ij,...i->...j", av, g).reshape(-1, sb[0]), axis=0)
            return ga, gb
        if len(sa) == 1:
            ga = _sum(_einsum("...ij,...j->...i", bv, g).reshape(-1, sa[0]), axis=0)
            gb = _broadcast_to(_einsum("i,...j->...ij", av, g), sb)
            return ga, gb
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), sa)
        if len(sb) == 2:
            gb = av.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = _unbroadcast(av.swapaxes(-1, -2) @ g, sb)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


dot = matmul
matvec = matmul


def einsum(subscripts: str, a, b):
    """Two-operand einsum without operand-internal repeated indices."""
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa_s, sb_s = ins.split(",")
    av, bv = _val(a), _val(b)
    out = _einsum(subscripts, av, bv)
    shape_a, shape_b = np.shape(_primal(av)), np.shape(_primal(bv))

    def vjp(g):
        ga = _einsum(f"{out_s},{sb_s}->{sa_s}", g, bv) if isinstance(a, Var) else None
        gb = _einsum(f"{out_s},{sa_s}->{sb_s}", g, av) if isinstance(b, Var) else None
        if ga is not None and np.shape(_primal(ga)) != shape_a:
            ga = _broadcast_to(ga, shape_a)
        if gb is not None and np.shape(_primal(gb)) != shape_b:
            gb = _broadcast_to(gb, shape_b)
        return ga, gb

    return _record("einsum", out, (a, b), vjp)


def linear(A, x, At=None):
    """Apply a constant (dense or sparse) matrix along the last axis of ``x``.

    ``At`` may supply a precomputed transpose (CSR for sparse ``A``).
    """
    if sp.issparse(A):
        A = A.tocsr()
        if At is None:
            At = A.T.tocsr()
    else:
        A = np.asarray(A)
        At = A.T if At is None else At
    out = _apply_linear(A, _val(x))
    return _record("linear", out, (x,), lambda g: (_apply_linear(At, g),))


def gather(x, index, axis: int = -1):
    """``np.take(x, index, axis)``; the adjoint scatter-adds."""
    xv = _val(x)
    index = np.asarray(index)
    shape = np.shape(_primal(xv))
    ax = axis % len(shape)
    n = shape[ax]

    def take(v):
        if _is_dual(v):
            return Dual(np.take(v.value, index, axis=ax), np.take(v.tangent, index, axis=ax))
        return np.take(v, index, axis=ax)

    def scatter(g):
        if _is_dual(g):
            return Dual(scatter(g.value), scatter(g.tangent))
        gm = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(g.ndim - index.ndim, g.ndim)))
        lead = gm.shape[: gm.ndim - index.ndim]
        flat = gm.reshape(-1, index.size)
        res = np.zeros((flat.shape[0], n))
        for row in range(flat.shape[0]):
            res[row] = np.bincount(index.ravel(), weights=flat[row], minlength=n)
        return np.moveaxis(res.reshape(*lead, n), -1, ax)

    return _record("gather", take(xv), (x,), lambda g: (scatter(g),))


def reshape(x, shape):
    xv = _val(x)
    old = np.shape(_primal(xv))
    return _record("reshape", _reshape(xv, shape), (x,), lambda g: (_reshape(g, old),))


def transpose(x):
    """Swap the last two axes (plain transpose for matrices)."""
    xv = _val(x)
    return _record("transpose", xv.swapaxes(-1, -2), (x,), lambda g: (g.swapaxes(-1, -2),))


def _getitem(x, idx):
    xv = _val(x)
    shape = np.shape(_primal(xv))

    def vjp(g):
        if _is_dual(g):
            z = Dual(np.zeros(shape), np.zeros(shape))
            z.value[idx] += g.value
            z.tangent[idx] += g.tangent
            return (z,)
        z = np.zeros(shape)
        z[idx] += g
        return (z,)

    return _record("getitem", xv[idx], (x,), vjp)


def where(mask, a, b):
    """Select by a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(_primal(av)), np.shape(_primal(bv))
    out = _where(mask, av, bv)

    def vjp(g):
        return (_unbroadcast(_where(mask, g, 0.0), sa), _unbroadcast(_where(mask, 0.0, g), sb))

    return _record("where", out, (a, b), vjp)


def stop_gradient(x):
    """Identity whose reverse-mode adjoint is zero.

    Forward tangents still flow, so a forward-over-reverse replay of a
    function containing ``stop_gradient`` differentiates the *truncated*
    gradient exactly (its Jacobian, not a symmetric Hessian).
    """
    return _record("stop_gradient", _val(x), (x,), lambda g: (None,))


def _f32(x):
    if _is_dual(x):
        return Dual(x.value.astype(np.float32, copy=False), x.tangent.astype(np.float32, copy=False))
    return np.asarray(x).astype(np.float32, copy=False)


def _f64(x):
    if _is_dual(x):
        return Dual(x.value, x.tangent)
    return np.asarray(x, dtype=float)


def primal(x):
    """Plain value of ``x``: neither adjoints nor forward tangents pass."""
    return _primal(_val(x))


def sine_layer(eta, W, shift, omega0: float, fast: bool = False):
    """``sin(omega0 * (eta @ W.T + shift))`` as one node.

    ``eta`` is (..., P, n_in), ``W`` (n_out, n_in) and ``shift`` broadcasts
    against (..., P, n_out). The forward pass keeps ``cos`` (and, under a
    forward-mode tangent, the pieces of its derivative) for the adjoint.

    ``fast`` runs the layer in single precision: its output and the adjoint
    passed to ``eta`` are float32, while ``W`` and ``shift`` adjoints are
    returned in double. Results are then accurate to about 1e-6 relative;
    this is meant for bulk training, not for derivative checks.
    """
    ev, Wv, hv = _val(eta), _val(W), _val(shift)
    if fast:
        ev, Wl, hl = _f32(ev), _f32(Wv), _f32(hv)
    else:
        Wl, hl = Wv, hv
    z = ev @ (Wl.T * omega0) + hl * omega0
    dual = _is_dual(z)
    zv = z.value if dual else z
    s, c = np.sin(zv), np.cos(zv)
    c_om = c * omega0
    if dual:
        out = Dual(s, c * z.tangent)
        s_zt_om = s * z.tangent * omega0
    else:
        out = s
    se, sW, sh = np.shape(_primal(ev)), np.shape(_primal(Wv)), np.shape(_primal(hv))

    def vjp(g):
        if fast:
            g = _f32(g)
        if dual and _is_dual(g):
            gz = Dual(g.value * c_om, g.tangent * c_om - g.value * s_zt_om)
        elif dual:
            gz = Dual(g * c_om, -(g * s_zt_om))
        elif _is_dual(g):
            gz = Dual(g.value * c_om, g.tangent * c_om)
        else:
            gz = g * c_om
        ge = _unbroadcast(gz @ Wl, se) if isinstance(eta, Var) else None
        gW = None
        if isinstance(W, Var):
            extra = len(np.shape(_primal(gz))) - len(se)
            gzs = _sum(gz, axis=tuple(range(extra))) if extra > 0 else gz
            gW = gzs.reshape(-1, sW[0]).T @ ev.reshape(-1, sW[1])
        gh = _unbroadcast(gz, sh) if isinstance(shift, Var) else None
        if fast:
            gW = None if gW is None else _f64(gW)
            gh = None if gh is None else _f64(gh)
        return ge, gW, gh

    return _record("sine_layer", out, (eta, W, shift), vjp)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def _check_finite(tape: Tape, out):
    if not np.all(np.isfinite(_primal(_val(out)))):
        i = tape.first_nonfinite()
        where_ = f"node #{i} ({tape.ops[i]})" if i is not None else "output"
        raise EvaluationError(f"non-finite value first produced at {where_}")


def _run(f, leaves):
    tape = Tape()
    xs = [tape.leaf(v) for v in leaves]
    out = f(*xs)
    if not isinstance(out, Var):
        # output does not depend on any input
        return tape, xs, out, None
    if out.shape != ():
        raise ValueError(f"function must return a scalar, got shape {out.shape}")
    _check_finite(tape, out)
    return tape, xs, out, tape.backward(out)


def grad(f: Callable, *args):
    """Value and gradient of a scalar function recorded on a fresh tape.

    With a single argument returns ``(value, gradient)``; with several,
    ``(value, [gradients])``.
    """
    leaves = [np.asarray(a, dtype=float) for a in args]
    tape, xs, out, adj = _run(f, leaves)
    if adj is None:
        grads = [np.zeros_like(v) for v in leaves]
        value = float(out)
    else:
        grads = [np.zeros_like(v) if adj[x.index] is None else np.asarray(adj[x.index], dtype=float)
                 for x, v in zip(xs, leaves)]
        value = float(out.value)
    return (value, grads[0]) if len(args) == 1 else (value, grads)


def grad_and_hvp(f: Callable, args: Sequence, tangents: Sequence):
    """Gradient and Hessian-vector product by forward-over-reverse.

    ``tangents[i]`` is the direction for ``args[i]`` or ``None`` for a
    constant direction of zero. Returns ``(value, grads, hvps)``.
    """
    leaves = []
    for a, t in zip(args, tangents):
        a = np.asarray(a, dtype=float)
        leaves.append(a if t is None else Dual(a, np.asarray(t, dtype=float).reshape(a.shape)))
    tape, xs, out, adj = _run(f, leaves)
    grads, hvps = [], []
    for x, a in zip(xs, args):
        shape = np.shape(a)
        g = None if adj is None else adj[x.index]
        if g is None:
            grads.append(np.zeros(shape))
            hvps.append(np.zeros(shape))
        elif _is_dual(g):
            grads.append(np.array(np.broadcast_to(g.value, shape)))
            hvps.append(np.array(np.broadcast_to(g.tangent, shape)))
        else:
            grads.append(np.array(np.broadcast_to(g, shape), dtype=float))
            hvps.append(np.zeros(shape))
    value = float(_primal(_val(out))) if adj is not None else float(_primal(out))
    return value, grads, hvps


def hvp(f: Callable, x, v):
    """``(d^2 f / dx^2) @ v`` for a single-argument scalar function."""
    return grad_and_hvp(f, (x,), (v,))[2][0]


class Unrolled(NamedTuple):
    value: float
    grads: list
    latent: np.ndarray
    trajectory: list


def unrolled_grad(loss: Callable, params: Sequence, l0, steps: int, alpha: float,
                  outer: Callable | None = None, first_order: bool = False) -> Unrolled:
    """Derivative of ``outer(params, l_K)`` through K gradient-descent steps.

    The inner map is ``l_{j+1} = l_j - alpha * d loss(params, l_j) / dl``.
    ``loss`` and ``outer`` take ``(*params, l)``. The adjoint of the inner
    loop is propagated backwards with one Hessian-vector product per step::

        lbar_j = lbar_{j+1} - alpha * H_ll(l_j) lbar_{j+1}
        pbar  -= alpha * H_pl(l_j) lbar_{j+1}

    so second-order paths are included unless ``first_order`` is set.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    outer = loss if outer is None else outer
    params = [np.asarray(p, dtype=float) for p in params]
    n = len(params)
    traj = [np.asarray(l0, dtype=float)]
    for _ in range(steps):
        # params are constants here; only the latent gradient is needed
        _, gl = grad(lambda l: loss(*params, l), traj[-1])
        traj.append(traj[-1] - alpha * gl)
    value, gs = grad(outer, *params, traj[-1])
    pgrads, lbar = list(gs[:n]), gs[n]
    if not first_order:
        for j in range(steps - 1, -1, -1):
            _, _, hv = grad_and_hvp(loss, (*params, traj[j]), (None,) * n + (lbar,))
            for i in range(n):
                pgrads[i] = pgrads[i] - alpha * hv[i]
            lbar = lbar - alpha * hv[n]
    return Unrolled(value, pgrads, traj[-1], traj)
