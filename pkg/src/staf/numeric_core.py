"""Dense float64 primitives with forward + vector-Jacobian-product rules.

Every primitive is an :class:`Op` holding a pure ``forward`` that returns
``(output, ctx)`` and a ``backward(ctx, cotangent, needs)`` that returns one
cotangent per input.  :func:`apply` evaluates an op eagerly; when any input is
a :class:`Var` the result is a ``Var`` recorded on an implicit tape, otherwise
a plain ``ndarray`` comes back.  Composite functions written with these ops
therefore run unchanged on arrays (inference) and on ``Var`` (training).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

DTYPE = np.float64


class NumericError(ValueError):
    """Raised when a computation meets or produces non-finite values."""


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    backward: Optional[Callable] = None


class Var:
    """A value recorded on the tape."""

    __slots__ = ("value", "parents", "op", "ctx")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, value, parents=(), op=None, ctx=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = parents
        self.op = op
        self.ctx = ctx

    def __repr__(self):
        return f"Var(shape={self.value.shape}, op={self.op.name if self.op else None})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, idx):
        return getitem(self, idx)

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
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def apply(op: Op, *inputs, **params):
    """Evaluate ``op``; record it on the tape if any input is a ``Var``."""
    arrays = [value_of(x) for x in inputs]
    out, ctx = op.forward(*arrays, **params)
    if not any(isinstance(x, Var) for x in inputs):
        return out
    return Var(out, parents=tuple(inputs), op=op, ctx=ctx)


def _toposort(root: Var) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Var, wrt: Sequence[Var], cotangent=None) -> list:
    """Reverse-mode sweep from ``out``; returns cotangents for ``wrt``.

    ``cotangent`` defaults to ones (a scalar loss).  Leaves that do not
    influence ``out`` get zero arrays.
    """
    if cotangent is None:
        cotangent = np.ones_like(out.value)
    grads = {id(out): np.asarray(cotangent, dtype=DTYPE)}
    for node in reversed(_toposort(out)):
        g = grads.get(id(node))
        if g is None or node.op is None:
            continue
        needs = tuple(isinstance(p, Var) for p in node.parents)
        if node.op.backward is None:
            raise NumericError(f"op {node.op.name!r} has no backward rule")
        in_grads = node.op.backward(node.ctx, g, needs)
        for parent, pg in zip(node.parents, in_grads):
            if not isinstance(parent, Var) or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


def check_finite(x, what="input"):
    arr = value_of(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return x


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _add_fwd(a, b):
    return np.add(a, b, dtype=DTYPE), (_shape(a), _shape(b))


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    return np.subtract(a, b, dtype=DTYPE), (_shape(a), _shape(b))


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    return np.multiply(a, b, dtype=DTYPE), (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (_unbroadcast(g * b, _shape(a)) if needs[0] else None,
            _unbroadcast(g * a, _shape(b)) if needs[1] else None)


def _tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def _tanh_bwd(y, g, needs):
    return (g * (1.0 - y * y),)


ADD = Op("add", _add_fwd, _add_bwd)
SUB = Op("sub", _sub_fwd, _sub_bwd)
MUL = Op("mul", _mul_fwd, _mul_bwd)
TANH = Op("tanh", _tanh_fwd, _tanh_bwd)


def add(a, b):
    return apply(ADD, a, b)


def sub(a, b):
    return apply(SUB, a, b)


def mul(a, b):
    return apply(MUL, a, b)


def tanh(x):
    return apply(TANH, x)


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------


def _reshape_fwd(x, shape):
    return np.reshape(x, shape), np.shape(x)


def _reshape_bwd(in_shape, g, needs):
    return (g.reshape(in_shape),)


def _transpose_fwd(x, axes=None):
    axes = tuple(reversed(range(np.ndim(x)))) if axes is None else tuple(axes)
    return np.transpose(x, axes), axes


def _transpose_bwd(axes, g, needs):
    return (np.transpose(g, np.argsort(axes)),)


def _getitem_fwd(x, idx):
    return np.asarray(x)[idx], (np.shape(x), idx)


def _getitem_bwd(ctx, g, needs):
    shape, idx = ctx
    out = np.zeros(shape, dtype=DTYPE)
    parts = idx if isinstance(idx, tuple) else (idx,)
    if any(isinstance(p, (np.ndarray, list)) for p in parts):
        np.add.at(out, idx, g)
    else:
        out[idx] = g
    return (out,)


def _concat_fwd(*xs, axis=0):
    sizes = [np.shape(x)[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def _concat_bwd(ctx, g, needs):
    sizes, axis = ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _stack_fwd(*xs, axis=0):
    return np.stack(xs, axis=axis), (len(xs), axis)


def _stack_bwd(ctx, g, needs):
    n, axis = ctx
    return tuple(np.take(g, i, axis=axis) for i in range(n))


def _sum_fwd(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims), (np.shape(x), axis, keepdims)


def _sum_bwd(ctx, g, needs):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


RESHAPE = Op("reshape", _reshape_fwd, _reshape_bwd)
TRANSPOSE = Op("transpose", _transpose_fwd, _transpose_bwd)
GETITEM = Op("getitem", _getitem_fwd, _getitem_bwd)
CONCAT = Op("concat", _concat_fwd, _concat_bwd)
STACK = Op("stack", _stack_fwd, _stack_bwd)
SUM = Op("sum", _sum_fwd, _sum_bwd)


def reshape(x, shape):
    return apply(RESHAPE, x, shape=tuple(shape))


def transpose(x, axes=None):
    return apply(TRANSPOSE, x, axes=axes)


def swap_last(x):
    nd = len(_shape(value_of(x)))
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, idx):
    return apply(GETITEM, x, idx=idx)


def _take_rows_fwd(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    return np.asarray(x)[idx], (np.shape(x), idx)


def _take_rows_bwd(ctx, g, needs):
    shape, idx = ctx
    n = idx.size
    # gather transpose as a sparse (rows x n) one-hot product, much faster than add.at
    onehot = sparse.csr_matrix((np.ones(n), (idx.ravel(), np.arange(n))), shape=(shape[0], n))
    gx = onehot @ np.asarray(g).reshape(n, -1)
    return (np.asarray(gx).reshape(shape),)


TAKE_ROWS = Op("take_rows", _take_rows_fwd, _take_rows_bwd)


def take_rows(x, idx):
    """``x[idx]`` along the first axis for an integer index array of any shape."""
    return apply(TAKE_ROWS, x, idx=idx)


def concat(xs, axis=0):
    return apply(CONCAT, *xs, axis=axis)


def stack(xs, axis=0):
    return apply(STACK, *xs, axis=axis)


def sum_(x, axis=None, keepdims=False):
    return apply(SUM, x, axis=axis, keepdims=keepdims)


def _mean_axis_fwd(x, axis=0):
    # explicit left-to-right accumulation; independent of numpy's pairwise sums
    x = np.moveaxis(np.asarray(x, dtype=DTYPE), axis, 0)
    acc = x[0].copy()
    for k in range(1, x.shape[0]):
        acc += x[k]
    return acc / x.shape[0], (x.shape[0], axis)


def _mean_axis_bwd(ctx, g, needs):
    n, axis = ctx
    rep = np.repeat(np.expand_dims(g / n, 0), n, axis=0)
    return (np.moveaxis(rep, 0, axis),)


MEAN_AXIS = Op("mean_axis", _mean_axis_fwd, _mean_axis_bwd)


def mean_axis(x, axis=0):
    return apply(MEAN_AXIS, x, axis=axis)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def _matmul_fwd(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(ctx, g, needs):
    a, b = ctx
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
    return ga, gb


def _einsum_fwd(a, b, subscripts):
    ins, out = subscripts.split("->")
    sa, sb = ins.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ValueError("repeated indices within an operand are not supported")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in out and c not in other for c in s):
            raise ValueError("every operand index must appear in the output or the other operand")
    return np.einsum(subscripts, a, b, optimize=False), (a, b, sa, sb, out)


def _einsum_bwd(ctx, g, needs):
    a, b, sa, sb, out = ctx
    ga = np.einsum(f"{out},{sb}->{sa}", g, b, optimize=False) if needs[0] else None
    gb = np.einsum(f"{out},{sa}->{sb}", g, a, optimize=False) if needs[1] else None
    return ga, gb


def _linear_fwd(x, weight, bias):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != layer in-dim {weight.shape[1]}")
    y = np.matmul(x, weight.T) + bias
    return y, (x, weight)


def _linear_bwd(ctx, g, needs):
    x, weight = ctx
    gx = np.matmul(g, weight) if needs[0] else None
    gw = gb = None
    if needs[1] or needs[2]:
        g2 = g.reshape(-1, g.shape[-1])
        if needs[1]:
            gw = g2.T @ x.reshape(-1, x.shape[-1])
        if needs[2]:
            gb = g2.sum(axis=0)
    return gx, gw, gb


MATMUL = Op("matmul", _matmul_fwd, _matmul_bwd)
EINSUM = Op("einsum", _einsum_fwd, _einsum_bwd)
LINEAR = Op("linear", _linear_fwd, _linear_bwd)


def matmul(a, b):
    return apply(MATMUL, a, b)


def einsum(subscripts, a, b):
    return apply(EINSUM, a, b, subscripts=subscripts)


def linear(x, weight, bias):
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    return apply(LINEAR, x, weight, bias)


@dataclass
class LinearLayer:
    """Affine map with ``weight`` of shape (out, in) and ``bias`` of shape (out,)."""

    weight: object
    bias: object

    def __post_init__(self):
        w, b = value_of(self.weight), value_of(self.bias)
        if np.ndim(w) != 2 or np.ndim(b) != 1 or np.shape(w)[0] != np.shape(b)[0]:
            raise ValueError(f"inconsistent linear layer shapes {np.shape(w)} / {np.shape(b)}")

    @property
    def in_dim(self) -> int:
        return int(np.shape(value_of(self.weight))[1])

    @property
    def out_dim(self) -> int:
        return int(np.shape(value_of(self.weight))[0])

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


def linear_apply(layer: LinearLayer, x):
    return linear(x, layer.weight, layer.bias)


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, gain: float = 1.0) -> LinearLayer:
    """Xavier-uniform weights, zero bias."""
    limit = gain * np.sqrt(6.0 / (in_dim + out_dim))
    return LinearLayer(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))


# --------------------------------------------------------------------------
# softmax / norms
# --------------------------------------------------------------------------


def _softmax_fwd(x):
    x = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_rows: non-finite input")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(y, g, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _norm_fwd(x, axis=None):
    x = np.asarray(x, dtype=DTYPE)
    r = np.sqrt(np.sum(x * x, axis=axis))
    return r, (x, r, axis)


def _norm_bwd(ctx, g, needs):
    x, r, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
        r = np.expand_dims(r, axis)
    safe = np.where(r > 0, r, 1.0)
    return (np.where(r > 0, g * x / safe, 0.0),)


SOFTMAX = Op("softmax_rows", _softmax_fwd, _softmax_bwd)
NORM = Op("norm", _norm_fwd, _norm_bwd)


def softmax_rows(m):
    """Softmax over the last axis, with per-row max subtraction."""
    return apply(SOFTMAX, m)


def norm(x, axis=None):
    """Euclidean norm over ``axis`` (all entries when ``None``); zero-safe VJP."""
    return apply(NORM, x, axis=axis)


# --------------------------------------------------------------------------
# bilinear sampling
# --------------------------------------------------------------------------


def _bilinear_prep(shape_hw, pts):
    H, W = shape_hw
    px = (pts[..., 0] + 1.0) * 0.5 * (W - 1)
    py = (pts[..., 1] + 1.0) * 0.5 * (H - 1)
    in_x = (px >= 0) & (px <= W - 1)
    in_y = (py >= 0) & (py <= H - 1)
    px = np.clip(px, 0, W - 1)
    py = np.clip(py, 0, H - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = px - x0
    wy = py - y0
    return x0, x1, y0, y1, wx, wy, in_x, in_y


def _bilinear_fwd(fmap, pts):
    fmap = np.asarray(fmap, dtype=DTYPE)
    pts = np.asarray(pts, dtype=DTYPE)
    if fmap.ndim < 3 or pts.shape[-1] != 2:
        raise ValueError("bilinear_sample expects map (..., C, H, W) and points (..., n, 2)")
    lead = fmap.shape[:-3]
    if pts.shape[:-2] != lead:
        raise ValueError(f"leading dims differ: map {lead} vs points {pts.shape[:-2]}")
    C, H, W = fmap.shape[-3:]
    n = pts.shape[-2]
    B = int(np.prod(lead, dtype=np.int64))
    m = fmap.reshape(B, C, H, W).transpose(0, 2, 3, 1)  # B,H,W,C
    p = pts.reshape(B, n, 2)
    x0, x1, y0, y1, wx, wy, in_x, in_y = _bilinear_prep((H, W), p)
    b = np.arange(B)[:, None]
    v00, v01 = m[b, y0, x0], m[b, y0, x1]
    v10, v11 = m[b, y1, x0], m[b, y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    out = ((1 - wx_) * (1 - wy_) * v00 + wx_ * (1 - wy_) * v01
           + (1 - wx_) * wy_ * v10 + wx_ * wy_ * v11)
    ctx = (fmap.shape, pts.shape, (x0, x1, y0, y1, wx, wy, in_x, in_y), (v00, v01, v10, v11))
    return out.reshape(lead + (n, C)), ctx


def _bilinear_bwd(ctx, g, needs):
    map_shape, pts_shape, (x0, x1, y0, y1, wx, wy, in_x, in_y), (v00, v01, v10, v11) = ctx
    C, H, W = map_shape[-3:]
    B, n = x0.shape
    g = g.reshape(B, n, C)
    gmap = gpts = None
    if needs[0]:
        # scatter-add through one bincount over flat (b, y, x, c) indices
        base = np.arange(B)[:, None] * H
        cells = np.stack([(base + y0) * W + x0, (base + y0) * W + x1,
                          (base + y1) * W + x0, (base + y1) * W + x1], axis=-1)
        wts = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=-1)
        flat = cells[..., None] * C + np.arange(C)
        vals = wts[..., None] * g[:, :, None, :]
        acc = np.bincount(flat.ravel(), vals.ravel(), minlength=B * H * W * C)
        gmap = acc.reshape(B, H, W, C).transpose(0, 3, 1, 2).reshape(map_shape)
    if needs[1]:
        dpx = (1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10)
        dpy = (1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01)
        gx = (g * dpx).sum(axis=-1) * 0.5 * (W - 1) * in_x
        gy = (g * dpy).sum(axis=-1) * 0.5 * (H - 1) * in_y
        gpts = np.stack([gx, gy], axis=-1).reshape(pts_shape)
    return gmap, gpts


BILINEAR = Op("bilinear_sample", _bilinear_fwd, _bilinear_bwd)


def bilinear_sample(fmap, pts):
    """Sample ``fmap`` (..., C, H, W) at normalized points (..., n, 2) -> (..., n, C).

    Points are (x, y) in [-1, 1] with the align-corners convention; values
    outside are clamped to the border.
    """
    return apply(BILINEAR, fmap, pts)


# --------------------------------------------------------------------------
# transposed convolution (kernel 4, stride 2, padding 1)
# --------------------------------------------------------------------------

KERNEL = 4


# Polyphase form: output pixel (2i + a, 2j + b) only sees the 2x2 input
# neighbourhood starting at padded position (i + a, j + b), through taps
# k = 3 - a - 2r for neighbour offset r in {0, 1}.  Each of the four phases is
# one GEMM of that neighbourhood stack against a (Cin*4, Cout) tap matrix.
def _phase_weight(weight, a, b):
    taps_y, taps_x = [3 - a, 1 - a], [3 - b, 1 - b]
    Cout, Cin = weight.shape[:2]
    return weight[:, :, taps_y][:, :, :, taps_x].transpose(1, 2, 3, 0).reshape(Cin * 4, Cout)


def _phase_cols(windows, a, b, H, W):
    """(M*H*W, Cin*4) neighbourhood stack for phase (a, b) from 2x2 sliding windows."""
    w = windows[:, a:a + H, b:b + W]
    return w.reshape(-1, w.shape[-3] * 4)


def _deconv_fwd(x, weight, bias):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 3:
        raise ValueError("deconv expects (..., C, H, W)")
    Cout, Cin = weight.shape[:2]
    if weight.shape != (Cout, Cin, KERNEL, KERNEL):
        raise ValueError(f"deconv weight must be (Cout, Cin, {KERNEL}, {KERNEL}), got {weight.shape}")
    if x.shape[-3] != Cin:
        raise ValueError(f"deconv: input has {x.shape[-3]} channels, layer expects {Cin}")
    lead = x.shape[:-3]
    H, W = x.shape[-2:]
    M = int(np.prod(lead, dtype=np.int64))
    xp = np.zeros((M, H + 2, W + 2, Cin), dtype=DTYPE)
    xp[:, 1:H + 1, 1:W + 1] = x.reshape(M, Cin, H, W).transpose(0, 2, 3, 1)
    windows = sliding_window_view(xp, (2, 2), axis=(1, 2))  # (M, H+1, W+1, Cin, 2, 2)
    out = np.empty((M, Cout, H, 2, W, 2), dtype=DTYPE)
    for a in (0, 1):
        for b in (0, 1):
            y = _phase_cols(windows, a, b, H, W) @ _phase_weight(weight, a, b)
            out[:, :, :, a, :, b] = y.reshape(M, H, W, Cout).transpose(0, 3, 1, 2)
    out = out.reshape(lead + (Cout, 2 * H, 2 * W))
    out += bias[:, None, None]
    return out, (xp, weight, x.shape)


def _deconv_bwd(ctx, g, needs):
    xp, weight, x_shape = ctx
    Cout, Cin = weight.shape[:2]
    H, W = x_shape[-2:]
    M = xp.shape[0]
    g = np.asarray(g).reshape(M, Cout, H, 2, W, 2)
    windows = sliding_window_view(xp, (2, 2), axis=(1, 2))
    gxp = np.zeros_like(xp) if needs[0] else None
    gw = np.zeros_like(weight) if needs[1] else None
    for a in (0, 1):
        for b in (0, 1):
            gy = g[:, :, :, a, :, b].transpose(0, 2, 3, 1).reshape(M * H * W, Cout)
            if needs[0]:
                gc = (gy @ _phase_weight(weight, a, b).T).reshape(M, H, W, Cin, 2, 2)
                for ry in (0, 1):
                    for rx in (0, 1):
                        gxp[:, a + ry:a + ry + H, b + rx:b + rx + W] += gc[..., ry, rx]
            if needs[1]:
                gwp = (_phase_cols(windows, a, b, H, W).T @ gy).reshape(Cin, 2, 2, Cout).transpose(3, 0, 1, 2)
                gw[:, :, [[3 - a], [1 - a]], [[3 - b, 1 - b]]] = gwp
    gx = gxp[:, 1:H + 1, 1:W + 1].transpose(0, 3, 1, 2).reshape(x_shape) if needs[0] else None
    gb = g.sum(axis=(0, 2, 3, 4, 5)) if needs[2] else None
    return gx, gw, gb


DECONV = Op("deconv", _deconv_fwd, _deconv_bwd)


def deconv(x, weight, bias):
    """Transposed convolution, kernel 4 / stride 2 / padding 1: (.., Cin, H, W) -> (.., Cout, 2H, 2W)."""
    return apply(DECONV, x, weight, bias)


# --------------------------------------------------------------------------
# op registry and finite-difference verifier
# --------------------------------------------------------------------------

REGISTRY: dict = {}


def register(name: str, make_case: Callable, fn: Callable, tol: float = 1e-4):
    """Register a differentiable function for the gradient suite.

    ``make_case(rng)`` returns a list of input arrays; ``fn(*inputs)`` must
    work on arrays and on ``Var`` inputs.
    """
    REGISTRY[name] = {"make_case": make_case, "fn": fn, "tol": tol}
    return fn


@dataclass
class VJPReport:
    name: str
    verifiable: bool
    max_relative_error: float = float("nan")
    per_input: list = field(default_factory=list)
    message: str = ""

    def passed(self, tol=1e-4) -> bool:
        return self.verifiable and self.max_relative_error < tol


def vjp_check(op_handle, inputs, seed, *, params=None, max_coords=None, name=None) -> VJPReport:
    """Compare the tape VJP with central finite differences.

    ``op_handle`` is an :class:`Op` (``params`` forwarded) or a callable over
    arrays/``Var``.  Step ``h = 1e-6 * (1 + |x|)`` per coordinate.  With
    ``max_coords`` set, inputs larger than that are checked on a seeded random
    subset of coordinates.  The error for each input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-5 * (1 + F))``
    where ``F = sum|cotangent * output|``, the scale of the rounding noise in
    the differenced sums (so inputs with an exactly zero gradient still
    compare against a meaningful floor).
    """
    params = params or {}
    if isinstance(op_handle, Op):
        name = name or op_handle.name
        if op_handle.backward is None:
            return VJPReport(name, False, message="op has no backward rule; unverifiable")
        fn = lambda *xs: apply(op_handle, *xs, **params)  # noqa: E731
    else:
        fn = op_handle
        name = name or getattr(fn, "__name__", "fn")
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=DTYPE) for x in inputs]
    for x in inputs:
        check_finite(x, "vjp_check input")
    out0 = np.asarray(fn(*inputs), dtype=DTYPE)
    cot = rng.standard_normal(out0.shape)
    f_scale = float(np.sum(np.abs(cot * out0)))

    vars_ = [Var(x) for x in inputs]
    out = fn(*vars_)
    if not isinstance(out, Var):
        return VJPReport(name, False, message="output not traced; unverifiable")
    try:
        analytic = backward(out, vars_, cot)
    except NumericError as exc:
        return VJPReport(name, False, message=str(exc))

    per_input = []
    for k, x in enumerate(inputs):
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            h = 1e-6 * (1.0 + abs(flat[i]))
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            args_p = list(inputs)
            args_m = list(inputs)
            args_p[k] = xp.reshape(x.shape)
            args_m[k] = xm.reshape(x.shape)
            fp = np.sum(cot * fn(*args_p))
            fm = np.sum(cot * fn(*args_m))
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic[k].reshape(-1)[idx]
        denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0),
                    1e-5 * (1.0 + f_scale))
        per_input.append(float(np.max(np.abs(a - numeric), initial=0.0) / denom))
    return VJPReport(name, True, max(per_input, default=0.0), per_input)


# --------------------------------------------------------------------------
# tree utilities for weight containers
# --------------------------------------------------------------------------


def tree_leaves(obj, prefix="") -> list:
    """(path, leaf) pairs for arrays/Vars nested in dataclasses, dicts, lists."""
    import dataclasses

    if isinstance(obj, (np.ndarray, Var)):
        return [(prefix, obj)]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = []
        for f in dataclasses.fields(obj):
            out += tree_leaves(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        return out
    if isinstance(obj, dict):
        out = []
        for k in obj:
            out += tree_leaves(obj[k], f"{prefix}.{k}" if prefix else str(k))
        return out
    if isinstance(obj, (list, tuple)):
        out = []
        for i, v in enumerate(obj):
            out += tree_leaves(v, f"{prefix}.{i}" if prefix else str(i))
        return out
    return []


def tree_map(fn, obj):
    """Rebuild ``obj`` with every array/Var leaf replaced by ``fn(leaf)``."""
    import dataclasses

    if isinstance(obj, (np.ndarray, Var)):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return type(obj)(**{f.name: tree_map(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj)})
    if isinstance(obj, dict):
        return {k: tree_map(fn, v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [tree_map(fn, v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, v) for v in obj)
    return obj


def tree_unflatten(template, leaves):
    """Inverse of :func:`tree_leaves` given the same structure."""
    it = iter(leaves)
    return tree_map(lambda _: next(it), template)


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


def _label(x) -> int:
    if isinstance(x, str):
        import zlib

        return zlib.crc32(x.encode("utf-8"))
    return int(x)


def rng_for(seed: int, *path) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``seed`` and a hierarchical path.

    Streams for different paths are independent, so per-frame or per-seed
    draws do not depend on evaluation order.
    """
    ss = np.random.SeedSequence([_label(seed)] + [_label(p) for p in path])
    return np.random.Generator(np.random.Philox(ss))
