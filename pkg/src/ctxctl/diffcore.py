"""Small define-by-run reverse-mode autodiff over dense float64 tensors.

A :class:`Tape` records every primitive applied to tensors that carry a node
on it. Tensors without a node are constants: operations that only touch
constants are evaluated eagerly and never recorded, so the same model code
doubles as a plain (fast) numpy simulator when no tape is involved.

Broadcasting follows numpy for the elementwise ops; gradients are summed back
to the input shape.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

OP_KINDS = frozenset({
    "leaf", "add", "sub", "mul", "div", "matmul", "sum", "mean", "transpose",
    "concat", "slice", "exp", "log", "tanh", "sqrt", "power", "softmax",
    "layernorm", "gelu", "relu", "square", "neg", "rk4",
})


class DiffError(Exception):
    """Base class for autodiff errors."""


class ShapeError(DiffError, ValueError):
    pass


class DomainError(DiffError, ValueError):
    pass


class TapeError(DiffError, RuntimeError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Tape:
    """Ordered record of primitive operations.

    Each node stores the ids of its recorded parents and one vector-Jacobian
    closure per parent. Parents always precede children, so a reverse sweep
    over node ids is a valid topological order.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[tuple] = []
        self._kinds: list[str] = []
        self.alive = True
        self.track_kinds = False

    def __len__(self):
        return len(self._parents)

    def _check(self):
        if not self.alive:
            raise TapeError("tape has been released")

    def leaf(self, value) -> "DTensor":
        """Register an independent variable."""
        self._check()
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 0:
            value = DTYPE(value)
        return self._push("leaf", value, (), ())

    def _push(self, kind, value, parents, vjps):
        nid = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjps)
        if self.track_kinds:
            self._kinds.append((nid, kind))
        return DTensor(value, self, nid)

    def kinds(self) -> list[str]:
        """Op kinds in record order (only when ``track_kinds`` was set)."""
        return [k for _, k in self._kinds]

    def release(self):
        """Drop all recorded nodes; tensors on this tape become unusable."""
        self._parents.clear()
        self._vjps.clear()
        self._kinds.clear()
        self.alive = False

    def backward(self, loss: "DTensor") -> "Gradients":
        """Reverse sweep from a scalar ``loss``; does not mutate the tape."""
        if not isinstance(loss, DTensor) or loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        self._check()
        if np.shape(loss.value) != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        grads: list = [None] * (loss.nid + 1)
        grads[loss.nid] = np.ones((), dtype=DTYPE)
        parents, vjps = self._parents, self._vjps
        for i in range(loss.nid, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for pid, fn in zip(parents[i], vjps[i]):
                c = fn(g)
                prev = grads[pid]
                grads[pid] = c if prev is None else prev + c
        return Gradients(self, grads)


class Gradients:
    """Map from recorded tensors to d(loss)/d(tensor)."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: "DTensor") -> np.ndarray:
        if t.tape is not self._tape:
            raise TapeError("tensor is not on the differentiated tape")
        g = self._grads[t.nid] if t.nid < len(self._grads) else None
        if g is None:
            return np.zeros(np.shape(t.value), dtype=DTYPE)
        return np.broadcast_to(g, np.shape(t.value)).astype(DTYPE, copy=True)

    def get(self, t, default=None):
        if not isinstance(t, DTensor) or t.tape is None:
            return default
        return self[t]


def _unbroadcast(g, shape):
    gshape = np.shape(g)
    if gshape == shape:
        return g
    nd = len(gshape) - len(shape)
    if nd > 0:
        g = np.sum(g, axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and np.shape(g)[i] != 1)
    if axes:
        g = np.sum(g, axis=axes, keepdims=True)
    return np.reshape(g, shape)


class DTensor:
    """Dense real tensor, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "nid")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, nid: int | None = None):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return getattr(self.value, "shape", ())

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.value, dtype=DTYPE)

    def item(self) -> float:
        return float(self.value)

    def __float__(self):
        return float(self.value)

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        tag = "const" if self.tape is None else f"node={self.nid}"
        return f"DTensor({np.asarray(self.value)!r}, {tag})"

    def __radd__(self, other):
        return add(other, self)

    def __rsub__(self, other):
        return sub(other, self)

    def __rmul__(self, other):
        return mul(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def const(value) -> DTensor:
    value = np.array(value, dtype=DTYPE)
    return DTensor(DTYPE(value) if value.ndim == 0 else value)


def value_of(x):
    return x.value if x.__class__ is DTensor else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if x.__class__ is DTensor and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    if tape is not None and not tape.alive:
        raise TapeError("operand refers to a released tape")
    return tape


def record(kind: str, inputs: Sequence, value, vjps: Sequence[Callable]) -> DTensor:
    """Register ``value`` as the output of primitive ``kind``.

    ``vjps[i]`` maps the output cotangent to the cotangent of ``inputs[i]``;
    entries for constant inputs are ignored.
    """
    if kind not in OP_KINDS:
        raise DiffError(f"unknown op-kind {kind!r}")
    tape = _tape_of(*inputs)
    if tape is None:
        return DTensor(value)
    pids, fns = [], []
    for x, fn in zip(inputs, vjps):
        if x.__class__ is DTensor and x.tape is not None:
            pids.append(x.nid)
            fns.append(fn)
    return tape._push(kind, value, tuple(pids), tuple(fns))


def _record2(kind, a, b, out, fa, fb):
    # hot path for binary ops
    ta = a.tape if a.__class__ is DTensor else None
    tb = b.tape if b.__class__ is DTensor else None
    if ta is None:
        if tb is None:
            return DTensor(out)
        if not tb.alive:
            raise TapeError("operand refers to a released tape")
        return tb._push(kind, out, (b.nid,), (fb,))
    if not ta.alive:
        raise TapeError("operand refers to a released tape")
    if tb is None:
        return ta._push(kind, out, (a.nid,), (fa,))
    if ta is not tb:
        raise TapeError("operands live on different tapes")
    return ta._push(kind, out, (a.nid, b.nid), (fa, fb))


def _record1(kind, a, out, fa):
    ta = a.tape if a.__class__ is DTensor else None
    if ta is None:
        return DTensor(out)
    if not ta.alive:
        raise TapeError("operand refers to a released tape")
    return ta._push(kind, out, (a.nid,), (fa,))


def _shape_of(v):
    return getattr(v, "shape", ())


def _unb(g, ref):
    rs = getattr(ref, "shape", ())
    if getattr(g, "shape", ()) == rs:
        return g
    return _unbroadcast(g, rs)


def _shape_error(kind, av, bv):
    return ShapeError(f"{kind}: incompatible shapes {_shape_of(av)} and {_shape_of(bv)}")


# -- elementwise arithmetic ------------------------------------------------

def _ident(g):
    return g


def _negate(g):
    return -g


_SCALARS = (np.float64, float)


def add(a, b) -> DTensor:
    av = a.value if a.__class__ is DTensor else a
    bv = b.value if b.__class__ is DTensor else b
    try:
        out = av + bv
    except ValueError:
        raise _shape_error("add", av, bv) from None
    if av.__class__ in _SCALARS and bv.__class__ in _SCALARS:
        return _record2("add", a, b, out, _ident, _ident)
    return _record2("add", a, b, out, lambda g: _unb(g, av), lambda g: _unb(g, bv))


def sub(a, b) -> DTensor:
    av = a.value if a.__class__ is DTensor else a
    bv = b.value if b.__class__ is DTensor else b
    try:
        out = av - bv
    except ValueError:
        raise _shape_error("sub", av, bv) from None
    if av.__class__ in _SCALARS and bv.__class__ in _SCALARS:
        return _record2("sub", a, b, out, _ident, _negate)
    return _record2("sub", a, b, out, lambda g: _unb(g, av), lambda g: -_unb(g, bv))


def mul(a, b) -> DTensor:
    av = a.value if a.__class__ is DTensor else a
    bv = b.value if b.__class__ is DTensor else b
    try:
        out = av * bv
    except ValueError:
        raise _shape_error("mul", av, bv) from None
    if av.__class__ in _SCALARS and bv.__class__ in _SCALARS:
        return _record2("mul", a, b, out, lambda g: g * bv, lambda g: g * av)
    return _record2("mul", a, b, out, lambda g: _unb(g * bv, av), lambda g: _unb(g * av, bv))


def div(a, b) -> DTensor:
    av = a.value if a.__class__ is DTensor else a
    bv = b.value if b.__class__ is DTensor else b
    if getattr(bv, "ndim", 0):
        if not np.all(bv):
            raise DomainError("div: division by zero")
    elif bv == 0:
        raise DomainError("div: division by zero")
    try:
        out = av / bv
    except ValueError:
        raise _shape_error("div", av, bv) from None
    return _record2("div", a, b, out, lambda g: _unb(g / bv, av), lambda g: _unb(-g * out / bv, bv))


def neg(a) -> DTensor:
    return record("neg", (a,), -value_of(a), (lambda g: -g,))


def square(a) -> DTensor:
    av = value_of(a)
    return record("square", (a,), av * av, (lambda g: 2.0 * g * av,))


def power(a, p: float) -> DTensor:
    if isinstance(p, DTensor):
        raise DiffError("power: exponent must be a constant")
    av = value_of(a)
    if np.any(av < 0) and not float(p).is_integer():
        raise DomainError("power: negative base with non-integer exponent")
    out = np.power(av, p)
    return record("power", (a,), out, (lambda g: g * p * np.power(av, p - 1),))


def exp(a) -> DTensor:
    out = np.exp(value_of(a))
    return record("exp", (a,), out, (lambda g: g * out,))


def log(a) -> DTensor:
    av = value_of(a)
    if np.any(av <= 0):
        raise DomainError("log: non-positive argument")
    return record("log", (a,), np.log(av), (lambda g: g / av,))


def sqrt(a) -> DTensor:
    av = value_of(a)
    if np.any(av < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(av)
    return record("sqrt", (a,), out, (lambda g: 0.5 * g / out,))


def tanh(a) -> DTensor:
    out = np.tanh(value_of(a))
    return record("tanh", (a,), out, (lambda g: g * (1.0 - out * out),))


def relu(a) -> DTensor:
    av = value_of(a)
    mask = av > 0
    return record("relu", (a,), np.where(mask, av, 0.0), (lambda g: g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> DTensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = value_of(a)
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return record("gelu", (a,), out, (vjp,))


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> DTensor:
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) == 0 or np.ndim(bv) == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {np.shape(av)} and {np.shape(bv)}")
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {np.shape(av)} and {np.shape(bv)}") from None

    def ga(g):
        if np.ndim(bv) == 1:
            return np.multiply.outer(g, bv) if np.ndim(av) > 1 else g * bv
        return g @ np.swapaxes(bv, -1, -2) if np.ndim(av) > 1 else bv @ g

    def gb(g):
        if np.ndim(av) == 1:
            return np.multiply.outer(av, g) if np.ndim(bv) > 1 else g * av
        if np.ndim(bv) == 1:
            return np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, np.shape(bv))

    return record("matmul", (a, b), out, (ga, gb))


def sum_(a, axis=None, keepdims=False) -> DTensor:
    av = value_of(a)
    shape = np.shape(av)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return record("sum", (a,), out, (vjp,))


def mean(a, axis=None, keepdims=False) -> DTensor:
    av = value_of(a)
    shape = np.shape(av)
    out = np.mean(av, axis=axis, keepdims=keepdims)
    n = av.size // max(np.size(out), 1) if np.ndim(av) else 1

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, shape)

    return record("mean", (a,), out, (vjp,))


def transpose(a, axes=None) -> DTensor:
    av = value_of(a)
    if axes is None:
        axes = tuple(range(np.ndim(av) - 2)) + (np.ndim(av) - 1, np.ndim(av) - 2) if np.ndim(av) >= 2 else ()
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), np.transpose(av, axes), (lambda g: np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> DTensor:
    vals = [np.asarray(value_of(x)) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(v.shape) for v in vals)) from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    nd = out.ndim
    ax = axis % nd

    def make(i):
        lo, hi = bounds[i], bounds[i + 1]
        key = (slice(None),) * ax + (slice(lo, hi),)
        return lambda g: g[key]

    return record("concat", tuple(xs), out, tuple(make(i) for i in range(len(xs))))


def slice_(a, key) -> DTensor:
    """Basic (non-fancy) indexing; supports ints, slices, None and Ellipsis."""
    av = np.asarray(value_of(a))
    try:
        out = av[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {av.shape}") from None
    shape = av.shape

    def vjp(g):
        z = np.zeros(shape, dtype=DTYPE)
        z[key] = g
        return z

    return record("slice", (a,), out, (vjp,))


# -- fused primitives ---------------------------------------------------------

def softmax(a, mask=None) -> DTensor:
    """Softmax over the last axis; ``mask`` (bool, True = keep) is a constant."""
    x = value_of(a)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return s * (g - np.sum(g * s, axis=-1, keepdims=True))

    return record("softmax", (a,), s, (vjp,))


def layernorm(a, gain, bias, eps: float = 1e-5) -> DTensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x = value_of(a)
    gv, bv = value_of(gain), value_of(bias)
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    d = x.shape[-1]
    lead = tuple(range(x.ndim - 1))

    def gx(g):
        gh = g * gv
        return inv * (gh - np.mean(gh, axis=-1, keepdims=True)
                      - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))

    def gg(g):
        return np.sum(g * xhat, axis=lead) if lead else g * xhat

    def gb(g):
        return np.sum(g, axis=lead) if lead else g

    del d
    return record("layernorm", (a, gain, bias), out, (gx, gg, gb))


# -- drivers ------------------------------------------------------------------

def grad(fn: Callable, *points):
    """Value and gradient of scalar ``fn`` at ``points`` (arrays)."""
    tape = Tape()
    leaves = [tape.leaf(p) for p in points]
    out = fn(*leaves)
    if out.__class__ is DTensor and out.tape is tape:
        gs = tape.backward(out)
        result = [gs[l] for l in leaves]
    else:
        result = [np.zeros(np.shape(l.value), dtype=DTYPE) for l in leaves]
    tape.release()
    return float(value_of(out)), (result[0] if len(result) == 1 else result)


def check_gradient(f: Callable, point, eps: float = 1e-5) -> float:
    """Max relative error between AD and central differences of scalar ``f``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(value_of(point), dtype=DTYPE)
    _, ad = grad(f, point)
    ad = np.asarray(ad).ravel()
    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(value_of(f(const(xp.reshape(point.shape)))))
        fm = float(value_of(f(const(xm.reshape(point.shape)))))
        if not (math.isfinite(fp) and math.isfinite(fm) and math.isfinite(ad[i])):
            raise NonFiniteError(f"non-finite value at coordinate {i}", index=i)
        fd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(ad[i] - fd) / (abs(fd) + 1e-12))
    return worst


DTensor.__add__ = add
DTensor.__sub__ = sub
DTensor.__mul__ = mul
DTensor.__truediv__ = div
DTensor.__matmul__ = matmul
DTensor.__neg__ = neg
DTensor.__pow__ = power
DTensor.__getitem__ = slice_
