"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tape` records every operation whose inputs include a watched
tensor.  Tensors that were never watched behave as constants: they take part
in arithmetic but receive no gradient.  A tape serves one forward evaluation
and is thrown away after :meth:`Tape.backward`.

    >>> with Tape() as tape:
    ...     x = tape.watch(3.0)
    ...     y = x * x
    >>> float(tape.backward(y)[x.grad_id].data)
    6.0

Batched work is expressed with leading dimensions; elementwise ops follow
numpy broadcasting and gradients are summed back over broadcast axes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """n-dimensional float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "grad_id", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, grad_id: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad_id = grad_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = "" if self.grad_id is None else f", grad_id={self.grad_id}"
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only square powers are supported")

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def prod(self, axis=-1): return prod(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return swapaxes(self, -1, -2)


def _not_scalar(t):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of tracked operations.

    Node ids double as the ``grad_id`` of the tensor a node produced, so
    parents always carry smaller ids than their children.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple[str, tuple, Callable | None]] = []
        self.closed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    def watch(self, value) -> Tensor:
        """Register ``value`` as a leaf that gradients are taken against."""
        if self.closed:
            raise TapeError("tape already consumed by backward()")
        data = value.data if isinstance(value, Tensor) else value
        self.nodes.append(("leaf", (), None))
        return Tensor(np.array(data, dtype=DTYPE), len(self.nodes) - 1, self)

    def _record(self, kind: str, data, parents: tuple, vjp: Callable) -> Tensor:
        self.nodes.append((kind, parents, vjp))
        return Tensor(data, len(self.nodes) - 1, self)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar ``loss`` w.r.t. every leaf it depends on.

        Returns a mapping ``grad_id -> Tensor`` for watched leaves.  Leaves
        the loss does not depend on are absent from the mapping.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.grad_id is None or loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if self.closed:
            raise TapeError("tape already consumed by backward()")
        self.closed = True
        acc: dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
        out: dict[int, Tensor] = {}
        nodes = self.nodes
        for nid in range(loss.grad_id, -1, -1):
            g = acc.pop(nid, None)
            if g is None:
                continue
            kind, parents, vjp = nodes[nid]
            if vjp is None:
                out[nid] = Tensor(g)
                continue
            for pid, pg in zip(parents, vjp(g)):
                if pid is None or pg is None:
                    continue
                prev = acc.get(pid)
                acc[pid] = pg if prev is None else prev + pg
        self.nodes = []
        return out

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Like :meth:`backward` but returns arrays aligned with ``wrt``;
        zeros for leaves the loss does not reach."""
        grads = self.backward(loss)
        res = []
        for t in wrt:
            g = grads.get(t.grad_id)
            res.append(np.zeros_like(t.data) if g is None else g.data)
        return res


def _tape_of(*ts) -> Tape | None:
    for t in ts:
        if isinstance(t, Tensor) and t.grad_id is not None:
            if t.tape.closed:
                raise TapeError("operand belongs to a consumed tape")
            return t.tape
    return None


def _ids(*ts):
    return tuple(t.grad_id if isinstance(t, Tensor) else None for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b, out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b, out = _binary("add", a, b, np.add)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape._record("add", out, _ids(a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b, out = _binary("sub", a, b, np.subtract)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape._record("sub", out, _ids(a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b, out = _binary("mul", a, b, np.multiply)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    return tape._record("mul", out, _ids(a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b, out = _binary("div", a, b, np.divide)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    return tape._record("div", out, _ids(a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape),
                                   _unbroadcast(-g * out / bd, bd.shape)))


def _unary(kind: str, a, out, dfn):
    a = as_tensor(a)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    return tape._record(kind, out, (a.grad_id,), lambda g: (dfn(g),))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _unary("neg", a, -a.data, lambda g: -g)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _unary("square", a, x * x, lambda g: 2.0 * g * x)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _unary("log", a, np.log(x), lambda g: g / x)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Saturate to ``[lo, hi]``; gradient is 1 on the closed interval, 0 outside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _unary("clamp", a, np.clip(x, lo, hi), lambda g: g * inside)


def minimum(a, s: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    keep = x <= s
    return _unary("minimum", a, np.minimum(x, s), lambda g: g * keep)


def maximum(a, s: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    keep = x >= s
    return _unary("maximum", a, np.maximum(x, s), lambda g: g * keep)


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    return _unary("relu", a, x * pos, lambda g: g * pos)


def lincomb(terms: Sequence, coefs: Sequence[float]) -> Tensor:
    """``sum_i coefs[i] * terms[i]`` for constant scalar coefficients."""
    if len(terms) != len(coefs) or not terms:
        raise ValueError("lincomb needs equally many terms and coefficients")
    terms = [as_tensor(t) for t in terms]
    shape = terms[0].shape
    out = coefs[0] * terms[0].data
    for c, t in zip(coefs[1:], terms[1:]):
        if t.shape != shape:
            raise ShapeError("lincomb", shape, t.shape)
        out = out + c * t.data
    tape = _tape_of(*terms)
    if tape is None:
        return Tensor(out)
    cs = tuple(coefs)
    return tape._record("lincomb", out, _ids(*terms), lambda g: tuple(c * g for c in cs))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics, including a 1-D right operand as a vector."""
    a, b, out = _binary("matmul", a, b, np.matmul)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def vjp(g):
        A, B, G = ad, bd, g
        if B.ndim == 1:
            B = B[:, None]
            G = G[..., None]
        if A.ndim == 1:
            A = A[None, :]
            G = G[..., None, :]
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return tape._record("matmul", out, _ids(a, b), vjp)


def matvec(A, x) -> Tensor:
    """Batched matrix-vector product: ``(..., o, i) x (..., i) -> (..., o)``."""
    A, x = as_tensor(A), as_tensor(x)
    if A.ndim < 2 or x.ndim < 1 or A.shape[-1] != x.shape[-1]:
        raise ShapeError("matvec", A.shape, x.shape)
    try:
        out = np.matmul(A.data, x.data[..., None])[..., 0]
    except ValueError:
        raise ShapeError("matvec", A.shape, x.shape) from None
    tape = _tape_of(A, x)
    if tape is None:
        return Tensor(out)
    Ad, xd = A.data, x.data

    def vjp(g):
        gA = g[..., :, None] * xd[..., None, :]
        gx = np.matmul(np.swapaxes(Ad, -1, -2), g[..., None])[..., 0]
        return _unbroadcast(gA, Ad.shape), _unbroadcast(gx, xd.shape)

    return tape._record("matvec", out, _ids(A, x), vjp)


# --------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape)

    return _unary("sum", a, out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def prod(a, axis: int = -1) -> Tensor:
    """Product over one axis; the gradient uses exclusive cumulative products,
    so zeros in the input are handled exactly."""
    a = as_tensor(a)
    ax = axis % a.ndim
    last = ax == a.ndim - 1
    x = a.data if last else np.moveaxis(a.data, ax, -1)
    out = x.prod(axis=-1)

    def vjp(g):
        ones = np.ones(x.shape[:-1] + (1,), dtype=DTYPE)
        left = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
        right = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
        full = g[..., None] * left * right
        return full if last else np.moveaxis(full, -1, ax)

    return _unary("prod", a, out, vjp)


# ----------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(np.atleast_1d(shape))) from None
    return _unary("reshape", a, out, lambda g: g.reshape(old))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _unary("swapaxes", a, np.swapaxes(a.data, i, j), lambda g: np.swapaxes(g, i, j))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return full

    return _unary("getitem", a, np.array(out, dtype=DTYPE), vjp)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return tape._record("concat", out, _ids(*ts),
                        lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    n = len(ts)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return tape._record("stack", out, _ids(*ts), vjp)


def where(mask, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b, out = _binary("where", a, b, lambda x, y: np.where(mask, x, y))
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape._record("where", out, _ids(a, b),
                        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                                   _unbroadcast(np.where(mask, 0.0, g), sb)))
