"""Minimal dense-array reverse-mode autodiff on numpy arrays.

Everything the nets here need is a handful of primitives over 2-D float
arrays (plus 0-d scalars): convolution via im2col, a few pointwise maps,
matmul, reductions, and gathers.  Ops record onto an explicit Tape; the
backward pass walks the tape once in reverse creation order, which is a
valid topological order by construction.

Backward can itself be recorded (``create_graph=True``): the vjp of every
op on the discriminator path is written in terms of these same primitives,
so the gradient-norm penalty of the adversarial loss is differentiable a
second time.  Ops that are only ever differentiated once (softmax, layer
norm, the log-softmax used by the language model) keep plain-numpy vjps
and raise loudly if asked to build graph.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class EngineError(Exception):
    """Base class for numerics failures."""


class DimensionError(EngineError):
    """Operand shapes violate an op's contract."""


class ContractError(EngineError):
    """An op was used outside its documented contract."""


# --------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive ops; creation order is topological."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Node] = []


_STACK: list[Tape | None] = []


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@contextmanager
def recording(tp: Tape):
    _STACK.append(tp)
    try:
        yield tp
    finally:
        _STACK.pop()


@contextmanager
def paused():
    """Disable recording; ops run as plain numpy."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


class Node:
    """One value in the graph. Leaves carry no vjp."""

    __slots__ = ("value", "parents", "vjp", "idx")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.parents = parents
        self.vjp = vjp
        tp = active_tape()
        if tp is None:
            self.idx = -1
        else:
            self.idx = len(tp.nodes)
            tp.nodes.append(self)


def leaf(value) -> Node:
    return Node(value)


def val(x):
    """Raw array behind a Node; pass non-Nodes through untouched."""
    return x.value if isinstance(x, Node) else x


def _wrap(out, inputs, vjp):
    if active_tape() is not None and any(isinstance(x, Node) for x in inputs):
        return Node(out, tuple(inputs), vjp)
    return out


def _first_order(g, opname):
    if isinstance(g, Node):
        raise ContractError(f"{opname} is not twice-differentiable")
    return g


# --------------------------------------------------------------------------
# elementwise / broadcast arithmetic
#
# Supported broadcast combos: identical shapes, scalar against anything,
# and a (1, C) row against (L, C).  Nothing else; this is not a general
# broadcasting engine.


def _shape(x):
    return np.shape(val(x))


def _reduce_to(g, shape):
    gshape = _shape(g)
    if gshape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        s = sum_all(g)
        return s if shape == () else reshape(s, shape)
    if (
        len(shape) == 2
        and len(gshape) == 2
        and shape[0] == 1
        and shape[1] == gshape[1]
    ):
        return sum_rows(g)
    raise DimensionError(f"cannot reduce adjoint {gshape} to {shape}")


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    ashape, bshape = np.shape(av), np.shape(bv)

    def vjp(g):
        return (_reduce_to(g, ashape), _reduce_to(g, bshape))

    return _wrap(out, (a, b), vjp)


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    ashape, bshape = np.shape(av), np.shape(bv)

    def vjp(g):
        return (_reduce_to(g, ashape), _reduce_to(neg(g), bshape))

    return _wrap(out, (a, b), vjp)


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    ashape, bshape = np.shape(av), np.shape(bv)

    def vjp(g):
        return (_reduce_to(mul(g, b), ashape), _reduce_to(mul(g, a), bshape))

    return _wrap(out, (a, b), vjp)


def smul(x, c: float):
    """Scale by a python-float constant (never differentiated w.r.t. c)."""
    out = val(x) * c

    def vjp(g):
        return (smul(g, c),)

    return _wrap(out, (x,), vjp)


def neg(x):
    return smul(x, -1.0)


def square(x):
    out = val(x) * val(x)

    def vjp(g):
        return (mul(g, smul(x, 2.0)),)

    return _wrap(out, (x,), vjp)


def reciprocal(x):
    out = 1.0 / val(x)
    holder = {}

    def vjp(g):
        o = holder.get("out", out)
        return (neg(mul(g, square(o))),)

    res = _wrap(out, (x,), vjp)
    if isinstance(res, Node):
        holder["out"] = res
    return res


def sqrt_eps(x, eps: float = 0.0):
    """sqrt(x + eps); eps keeps the derivative finite at x == 0."""
    out = np.sqrt(val(x) + eps)
    holder = {}

    def vjp(g):
        o = holder.get("out", out)
        return (mul(g, smul(reciprocal(o), 0.5)),)

    res = _wrap(out, (x,), vjp)
    if isinstance(res, Node):
        holder["out"] = res
    return res


def log(x):
    out = np.log(val(x))

    def vjp(g):
        return (mul(g, reciprocal(x)),)

    return _wrap(out, (x,), vjp)


def clamp(x, lo: float, hi: float):
    xv = np.asarray(val(x))
    out = np.clip(xv, lo, hi)
    mask = ((xv >= lo) & (xv <= hi)).astype(xv.dtype)

    def vjp(g):
        return (mul(g, mask),)

    return _wrap(out, (x,), vjp)


def leaky_relu(x, slope: float = 0.2):
    xv = np.asarray(val(x))
    mask = np.where(xv > 0, 1.0, slope).astype(xv.dtype)
    out = xv * mask

    def vjp(g):
        return (mul(g, mask),)

    return _wrap(out, (x,), vjp)


def sigmoid(x):
    xa = np.asarray(val(x))
    with np.errstate(under="ignore"):
        z = np.exp(-np.abs(xa))
        out = np.where(xa >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    holder = {}

    def vjp(g):
        o = holder.get("out", out)
        return (mul(mul(g, o), sub(1.0, o)),)

    res = _wrap(out, (x,), vjp)
    if isinstance(res, Node):
        holder["out"] = res
    return res


# --------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    xv = val(x)
    out = np.reshape(xv, shape)
    old = np.shape(xv)

    def vjp(g):
        return (reshape(g, old),)

    return _wrap(out, (x,), vjp)


def transpose(x):
    out = np.ascontiguousarray(val(x).T)

    def vjp(g):
        return (transpose(g),)

    return _wrap(out, (x,), vjp)


def slice_rows(x, start: int, stop: int):
    xv = val(x)
    n = xv.shape[0]
    out = xv[start:stop].copy()

    def vjp(g):
        return (pad_rows(g, start, n - stop),)

    return _wrap(out, (x,), vjp)


def pad_rows(x, before: int, after: int):
    xv = val(x)
    out = np.pad(xv, ((before, after), (0, 0)))

    def vjp(g):
        return (slice_rows(g, before, before + xv.shape[0]),)

    return _wrap(out, (x,), vjp)


def slice_cols(x, start: int, stop: int):
    xv = val(x)
    m = xv.shape[1]
    out = np.ascontiguousarray(xv[:, start:stop])

    def vjp(g):
        return (pad_cols(g, start, m - stop),)

    return _wrap(out, (x,), vjp)


def pad_cols(x, before: int, after: int):
    xv = val(x)
    out = np.pad(xv, ((0, 0), (before, after)))

    def vjp(g):
        return (slice_cols(g, before, before + xv.shape[1]),)

    return _wrap(out, (x,), vjp)


def concat_cols(xs):
    vs = [val(x) for x in xs]
    out = np.concatenate(vs, axis=1)
    offs = np.cumsum([0] + [v.shape[1] for v in vs])

    def vjp(g):
        return tuple(slice_cols(g, offs[i], offs[i + 1]) for i in range(len(vs)))

    return _wrap(out, tuple(xs), vjp)


# --------------------------------------------------------------------------
# reductions


def sum_all(x):
    xv = val(x)
    out = np.asarray(np.sum(xv))
    shape = np.shape(xv)

    def vjp(g):
        return (ones_expand(g, shape),)

    return _wrap(out, (x,), vjp)


def mean_all(x):
    xv = val(x)
    n = max(1, int(np.size(xv)))
    out = np.asarray(np.sum(xv) / n)
    shape = np.shape(xv)

    def vjp(g):
        return (ones_expand(smul(g, 1.0 / n), shape),)

    return _wrap(out, (x,), vjp)


def ones_expand(s, shape):
    """Broadcast a scalar to `shape` (linear; adjoint of sum_all)."""
    sv = val(s)
    out = np.full(shape, np.asarray(sv).reshape(()), dtype=np.asarray(sv).dtype)

    def vjp(g):
        return (sum_all(g),)

    return _wrap(out, (s,), vjp)


def sum_rows(x):
    xv = val(x)
    out = xv.sum(axis=0, keepdims=True)
    n = xv.shape[0]

    def vjp(g):
        return (tile_rows(g, n),)

    return _wrap(out, (x,), vjp)


def tile_rows(x, n: int):
    xv = val(x)
    out = np.repeat(xv, n, axis=0)

    def vjp(g):
        return (sum_rows(g),)

    return _wrap(out, (x,), vjp)


def mean_rows(x):
    xv = val(x)
    return smul(sum_rows(x), 1.0 / max(1, xv.shape[0]))


# --------------------------------------------------------------------------
# matmul / convolution


def matmul(a, b):
    av, bv = val(a), val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _wrap(out, (a, b), vjp)


def im2col(x, k: int):
    """Stack the k centred taps of every row: (L, C) -> (L, k*C).

    Out-of-range taps read as zero, which realises same-centred zero
    padding once the result is matmul'd against a flattened kernel.
    """
    if k % 2 == 0 or k < 1:
        raise DimensionError("kernel width must be odd and positive")
    xv = val(x)
    if xv.ndim != 2:
        raise DimensionError("im2col expects a 2-D array")
    l, c = xv.shape
    h = (k - 1) // 2
    cols = np.zeros((l, k * c), dtype=xv.dtype)
    for j in range(k):
        lo = max(0, h - j)
        hi = min(l, l + h - j)
        if lo < hi:
            cols[lo:hi, j * c : (j + 1) * c] = xv[lo + j - h : hi + j - h]

    def vjp(g):
        return (col2im(g, k),)

    return _wrap(cols, (x,), vjp)


def col2im(y, k: int):
    """Adjoint of im2col: (L, k*C) -> (L, C) by scatter-add."""
    yv = val(y)
    l, kc = yv.shape
    if kc % k != 0:
        raise DimensionError("column count not divisible by kernel width")
    c = kc // k
    h = (k - 1) // 2
    out = np.zeros((l, c), dtype=yv.dtype)
    for j in range(k):
        lo = max(0, h - j)
        hi = min(l, l + h - j)
        if lo < hi:
            out[lo + j - h : hi + j - h] += yv[lo:hi, j * c : (j + 1) * c]

    def vjp(g):
        return (im2col(g, k),)

    return _wrap(out, (y,), vjp)


def conv1d_flat(x, w, b, k: int):
    """Same-centred 1-D convolution with a flattened (k*Cin, Cout) kernel."""
    return add(matmul(im2col(x, k), w), b)


def conv1d(x, kernel, bias):
    """Same-centred non-causal 1-D convolution.

    x: (L, Cin); kernel: (k, Cin, Cout) with k odd; bias: (Cout,) or (1, Cout).
    output[l, o] = bias[o] + sum_{j,c} x[l + j - (k-1)/2, c] * kernel[j, c, o],
    rows outside [0, L) reading as zero.
    """
    kv = val(kernel)
    if kv.ndim != 3:
        raise DimensionError("kernel must have shape (k, cin, cout)")
    k, cin, cout = kv.shape
    if k % 2 == 0:
        raise DimensionError("kernel width must be odd")
    xv = val(x)
    if xv.ndim != 2 or xv.shape[1] != cin:
        raise DimensionError(f"input {xv.shape} does not match kernel cin={cin}")
    w = reshape(kernel, (k * cin, cout))
    b = reshape(bias, (1, cout))
    return conv1d_flat(x, w, b, k)


# --------------------------------------------------------------------------
# gathers


def gather_rows(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    tv = val(table)
    out = tv[ids].copy()
    n = tv.shape[0]

    def vjp(g):
        return (scatter_rows(g, ids, n),)

    return _wrap(out, (table,), vjp)


def scatter_rows(x, ids, n_rows: int):
    ids = np.asarray(ids, dtype=np.int64)
    xv = val(x)
    out = np.zeros((n_rows, xv.shape[1]), dtype=xv.dtype)
    np.add.at(out, ids, xv)

    def vjp(g):
        return (gather_rows(g, ids),)

    return _wrap(out, (x,), vjp)


def gather_cells(x, rows, cols):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    xv = val(x)
    out = xv[rows, cols].reshape(-1, 1).copy()
    shape = xv.shape

    def vjp(g):
        return (scatter_cells(g, rows, cols, shape),)

    return _wrap(out, (x,), vjp)


def scatter_cells(x, rows, cols, shape):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    xv = val(x)
    out = np.zeros(shape, dtype=xv.dtype)
    np.add.at(out, (rows, cols), xv[:, 0])

    def vjp(g):
        return (gather_cells(g, rows, cols),)

    return _wrap(out, (x,), vjp)


# --------------------------------------------------------------------------
# row-wise softmax family (first-order only)


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-9."""
    xv = val(x)
    s = softmax_np(xv)

    def vjp(g):
        gv = _first_order(g, "softmax_rows")
        dot = (gv * s).sum(axis=-1, keepdims=True)
        return ((gv - dot) * s,)

    return _wrap(s, (x,), vjp)


def log_softmax_rows(x):
    xv = val(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        s = np.exp(out)

    def vjp(g):
        gv = _first_order(g, "log_softmax_rows")
        return (gv - s * gv.sum(axis=-1, keepdims=True),)

    return _wrap(out, (x,), vjp)


def layer_norm_rows(x, gain, bias, eps: float = 1e-5):
    """Per-row normalisation with learned gain/bias, both shaped (1, C)."""
    xv, gv_, bv = val(x), val(gain), val(bias)
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv

    def vjp(g):
        gg = _first_order(g, "layer_norm_rows")
        gy = gg * gv_
        dx = inv * (gy - gy.mean(axis=1, keepdims=True) - xhat * (gy * xhat).mean(axis=1, keepdims=True))
        dgain = (gg * xhat).sum(axis=0, keepdims=True)
        dbias = gg.sum(axis=0, keepdims=True)
        return (dx, dgain, dbias)

    return _wrap(xhat * gv_ + bv, (x, gain, bias), vjp)


# --------------------------------------------------------------------------
# losses


BCE_EPS = 1e-7


def bce(p, target: float, eps: float = BCE_EPS):
    """Binary cross entropy on a probability scalar, clamped to [eps, 1-eps]."""
    q = clamp(p, eps, 1.0 - eps)
    t = float(target)
    return neg(add(smul(log(q), t), smul(log(sub(1.0, q)), 1.0 - t)))


# --------------------------------------------------------------------------
# backward


def backward(tp: Tape, loss, wrt, create_graph: bool = False, stop_at=()):
    """Adjoints of a scalar loss w.r.t. `wrt` nodes.

    Walks the tape once in reverse creation order.  With ``create_graph``
    the vjp computations are themselves recorded on `tp`, so the returned
    gradients are Nodes and can be differentiated again.  Nodes listed in
    `stop_at` receive adjoints but are not descended through.
    """
    lv = np.asarray(val(loss))
    if lv.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not isinstance(loss, Node):
        return [np.zeros_like(np.asarray(val(w))) for w in wrt]

    adj: dict[int, object] = {id(loss): np.ones_like(loss.value)}
    stop_ids = {id(n) for n in stop_at}
    ctx = recording(tp) if create_graph else paused()
    upto = loss.idx + 1 if loss.idx >= 0 else 0
    with ctx:
        for node in reversed(tp.nodes[:upto]):
            g = adj.get(id(node))
            if g is None or node.vjp is None or id(node) in stop_ids:
                continue
            grads = node.vjp(g)
            for p, pg in zip(node.parents, grads):
                if pg is None or not isinstance(p, Node):
                    continue
                cur = adj.get(id(p))
                adj[id(p)] = pg if cur is None else add(cur, pg)
    out = []
    for w in wrt:
        g = adj.get(id(w))
        out.append(np.zeros_like(np.asarray(val(w))) if g is None else g)
    return out


def assert_finite(x, what: str = "array"):
    xv = np.asarray(val(x))
    if not np.all(np.isfinite(xv)):
        raise EngineError(f"non-finite values in {what}")
    return x
