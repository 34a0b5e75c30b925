"""Dense float32 tensors with reverse-mode automatic differentiation.

Every value in this package -- images, feature maps, logits, network
weights -- is a `Tensor`: a numpy float32 array plus an optional backward
closure linking it to the tensors it was computed from. Calling
``backward()`` on a scalar walks that graph in reverse topological order
and accumulates gradients into the leaves.

Backward closures are themselves written in terms of tensor ops, so
``grad(..., create_graph=True)`` yields gradients that carry their own
graph. That is what makes gradient penalties (differentiating through a
gradient) possible without a separate engine.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "grad",
    "free_graph",
    "conv2d",
    "matmul",
    "pad2d",
    "dilate2d",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = bool(enabled)
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float32 n-d array with optional gradient tracking.

    Data is immutable by convention once the tensor participates in a
    graph; `grad` is only mutated by `backward()` and `zero-grad`-style
    resets. Leaves are tensors with no recorded inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward_fn", "_inputs")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self._backward_fn = None
        self._inputs: tuple[Tensor, ...] = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_ensure(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self, grad_output: "Tensor | None" = None) -> None:
        backward(self, grad_output)


def _fail_item(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise primitives ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(neg(div(mul(g, out), b)), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    out = _make(a.data / b.data, (a, b), bw)
    return out


def neg(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (neg(g),)

    return _make(-a.data, (a,), bw)


def pow_const(a, p: float) -> Tensor:
    a = _ensure(a)
    p = float(p)

    def bw(g):
        return (mul(g, mul(pow_const(a, p - 1.0), p)),)

    return _make(np.power(a.data, p, dtype=np.float32), (a,), bw)


def exp(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), bw)
    return out


def log(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (div(g, mul(out, 2.0)),)

    out = _make(np.sqrt(a.data), (a,), bw)
    return out


def abs_(a) -> Tensor:
    a = _ensure(a)
    sign = np.sign(a.data).astype(np.float32)

    def bw(g):
        return (mul(g, Tensor(sign)),)

    return _make(np.abs(a.data), (a,), bw)


def tanh(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), bw)
    return out


def relu(a) -> Tensor:
    a = _ensure(a)
    keep = (a.data > 0).astype(np.float32)

    def bw(g):
        return (mul(g, Tensor(keep)),)

    return _make(a.data * keep, (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _ensure(a)
    scale = np.where(a.data > 0, np.float32(1.0), np.float32(slope))

    def bw(g):
        return (mul(g, Tensor(scale)),)

    return _make(a.data * scale, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bw(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(data.astype(np.float32), (a,), bw)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = _ensure(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (mul(g, sigmoid(a)),)

    return _make(data.astype(np.float32), (a,), bw)


# -- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float32)

    def bw(g):
        if not keepdims and axes:
            kept = list(a.shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, a.shape),)

    return _make(data, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.max(axis=axes, keepdims=True)
    hit = (a.data == data).astype(np.float32)
    hit /= hit.sum(axis=axes, keepdims=True)
    out_data = data if keepdims else data.squeeze(axis=axes)

    def bw(g):
        if not keepdims and axes:
            kept = list(a.shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return (mul(broadcast_to(g, a.shape), Tensor(hit)),)

    return _make(out_data, (a,), bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (reshape(g, a.shape),)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _ensure(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (transpose(g, inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    if a.shape == tuple(shape):
        return a

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bw)


def flip(a, axes: tuple[int, ...]) -> Tensor:
    a = _ensure(a)

    def bw(g):
        return (flip(g, axes),)

    return _make(np.ascontiguousarray(np.flip(a.data, axis=axes)), (a,), bw)


def getitem(a, key) -> Tensor:
    """Basic (slice-only) indexing with a scatter backward."""
    a = _ensure(a)

    def bw(g):
        return (scatter(g, key, a.shape),)

    return _make(np.ascontiguousarray(a.data[key]), (a,), bw)


def scatter(g, key, shape: tuple[int, ...]) -> Tensor:
    """Place `g` into a zero tensor of `shape` at `key`; dual of getitem."""
    g = _ensure(g)
    data = np.zeros(shape, dtype=np.float32)
    data[key] = g.data

    def bw(gg):
        return (getitem(gg, key),)

    return _make(data, (g,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        pieces = []
        start = 0
        for t in tensors:
            key = tuple(
                slice(start, start + t.shape[axis]) if d == axis else slice(None)
                for d in range(t.ndim)
            )
            pieces.append(getitem(g, key) if t.requires_grad else None)
            start += t.shape[axis]
        return tuple(pieces)

    return _make(data, tuple(tensors), bw)


def pad2d(a, pads: tuple[tuple[int, int], tuple[int, int]]) -> Tensor:
    """Zero-pad the last two axes by ((top, bottom), (left, right))."""
    a = _ensure(a)
    (pt, pb), (pl, pr) = pads
    width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    data = np.pad(a.data, width)
    h, w = a.shape[-2], a.shape[-1]
    key = (Ellipsis, slice(pt, pt + h), slice(pl, pl + w))

    def bw(g):
        return (getitem(g, key),)

    return _make(data, (a,), bw)


def dilate2d(a, stride: tuple[int, int]) -> Tensor:
    """Insert stride-1 zeros between entries of the last two axes."""
    a = _ensure(a)
    sh, sw = stride
    if sh == 1 and sw == 1:
        return a
    h, w = a.shape[-2], a.shape[-1]
    shape = a.shape[:-2] + ((h - 1) * sh + 1, (w - 1) * sw + 1)
    key = (Ellipsis, slice(None, None, sh), slice(None, None, sw))
    return scatter(a, key, shape)


# -- fused normalization primitives -------------------------------------------


def normalize_core(a, eps: float, axis: int = -1) -> Tensor:
    """(x - mean) / sqrt(var + eps) along one axis, as a single fused op."""
    a = _ensure(a)
    axis = axis % a.ndim
    mu = a.data.mean(axis=axis, keepdims=True, dtype=np.float32)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv

    def bw(g):
        if not _GRAD_ENABLED:
            gd = g.data
            m1 = gd.mean(axis=axis, keepdims=True, dtype=np.float32)
            m2 = np.mean(gd * xhat, axis=axis, keepdims=True, dtype=np.float32)
            return (Tensor((gd - m1 - xhat * m2) * inv),)
        xh = Tensor(xhat)
        m1 = mean(g, axis=axis, keepdims=True)
        m2 = mean(mul(g, xh), axis=axis, keepdims=True)
        return (mul(sub(sub(g, m1), mul(xh, m2)), Tensor(inv)),)

    return _make(xhat, (a,), bw)


def softmax_core(a, axis: int = -1) -> Tensor:
    """Stable softmax along one axis, as a single fused op."""
    a = _ensure(a)
    axis = axis % a.ndim
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z, dtype=np.float32)
    p = e / e.sum(axis=axis, keepdims=True, dtype=np.float32)

    def bw(g):
        if not _GRAD_ENABLED:
            gd = g.data
            dot = np.sum(gd * p, axis=axis, keepdims=True, dtype=np.float32)
            return (Tensor((gd - dot) * p),)
        pt = Tensor(p)
        dot = sum_(mul(g, pt), axis=axis, keepdims=True)
        return (mul(sub(g, dot), pt),)

    return _make(p, (a,), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents differ: {a.shape[-1]} (last axis of left) "
            f"!= {b.shape[-2]} (second-to-last axis of right)"
        )

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(matmul(g, b.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(matmul(a.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def gather_rows(table, idx: np.ndarray) -> Tensor:
    """Row lookup `table[idx]`; backward scatter-adds into the table."""
    table = _ensure(table)
    idx = np.asarray(idx)

    def bw(g):
        return (scatter_add_rows(g, idx, table.shape[0]),)

    return _make(table.data[idx], (table,), bw)


def scatter_add_rows(g, idx: np.ndarray, nrows: int) -> Tensor:
    g = _ensure(g)
    data = np.zeros((nrows,) + g.shape[idx.ndim :], dtype=np.float32)
    np.add.at(data, idx, g.data)

    def bw(gg):
        return (gather_rows(gg, idx),)

    return _make(data, (g,), bw)


# -- convolution ------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _im2col(x: np.ndarray, kh, kw, stride, dilation, oh, ow) -> np.ndarray:
    """(n, c*kh*kw, oh*ow) window matrix of an already-padded input."""
    n, c = x.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    eh = (kh - 1) * dh + 1
    ew = (kw - 1) * dw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (eh, ew), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, ::dh, ::dw][:, :, :oh, :ow]
    # (n, c, kh, kw, oh, ow) keeps the copy loops contiguous in the source
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow)


def _conv2d_shapes(x_shape, w_shape, stride, padding, dilation):
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    kh, kw = w_shape[2], w_shape[3]
    oh = (x_shape[2] + 2 * ph - (kh - 1) * dh - 1) // sh + 1
    ow = (x_shape[3] + 2 * pw - (kw - 1) * dw - 1) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be empty: input {x_shape[2]}x{x_shape[3]}, "
            f"kernel {kh}x{kw}, stride {sh}x{sw}, padding {ph}x{pw}, "
            f"dilation {dh}x{dw}"
        )
    return oh, ow


def _conv2d_forward(
    x: np.ndarray, w: np.ndarray, stride, padding, dilation, cache: dict | None = None
) -> np.ndarray:
    ph, pw = padding
    co, ci, kh, kw = w.shape
    oh, ow = _conv2d_shapes(x.shape, w.shape, stride, padding, dilation)
    n = x.shape[0]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(x, kh, kw, stride, dilation, oh, ow)
    if cache is not None:
        cache["cols"] = cols
    out = np.matmul(w.reshape(co, ci * kh * kw), cols)
    return out.reshape(n, co, oh, ow)


def _conv2d_grad_w(
    x: np.ndarray, g: np.ndarray, w_shape, stride, padding, dilation,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Raw weight gradient: correlate input windows with the output grad."""
    ph, pw = padding
    co, ci, kh, kw = w_shape
    n, _, oh, ow = g.shape
    if cols is None:
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = _im2col(x, kh, kw, stride, dilation, oh, ow)
    gw = np.matmul(g.reshape(n, co, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def _conv2d_grad_x(x_shape, g: np.ndarray, w: np.ndarray, stride, padding, dilation) -> np.ndarray:
    """Raw input gradient: scatter the per-window grads back (col2im)."""
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    co, ci, kh, kw = w.shape
    n, _, oh, ow = g.shape
    hp, wp = x_shape[2] + 2 * ph, x_shape[3] + 2 * pw
    dcols = np.matmul(w.reshape(co, ci * kh * kw).T, g.reshape(n, co, oh * ow))
    dcols = dcols.reshape(n, ci, kh, kw, oh, ow)
    gxp = np.zeros((n, ci, hp, wp), dtype=np.float32)
    for a in range(kh):
        ys = a * dh
        for b in range(kw):
            xs = b * dw
            gxp[:, :, ys : ys + oh * sh : sh, xs : xs + ow * sw : sw] += dcols[:, :, a, b]
    if ph or pw:
        return gxp[:, :, ph : ph + x_shape[2], pw : pw + x_shape[3]]
    return gxp


def conv2d(x, w, stride=1, padding=0, dilation=1) -> Tensor:
    """2-d cross-correlation of NCHW input with OIHW weights (no bias)."""
    x, w = _ensure(x), _ensure(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-d OIHW, got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input axis 1 extent {x.shape[1]} "
            f"!= weight axis 1 extent {w.shape[1]}"
        )
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    pointwise = (
        w.shape[2] == 1
        and w.shape[3] == 1
        and stride == (1, 1)
        and padding == (0, 0)
    )
    cache: dict = {}
    if pointwise:
        n, c, h, wd = x.shape
        co = w.shape[0]
        data = np.matmul(w.data.reshape(co, c), x.data.reshape(n, c, h * wd))
        data = data.reshape(n, co, h, wd)
    else:
        record = _GRAD_ENABLED and (x.requires_grad or w.requires_grad)
        data = _conv2d_forward(
            x.data, w.data, stride, padding, dilation, cache if record else None
        )

    def bw(g):
        if not _GRAD_ENABLED:
            # fast raw paths; sufficient unless a graph over the gradient
            # itself is being built
            if pointwise:
                n, c, h, wd = x.shape
                co = w.shape[0]
                gflat = g.data.reshape(n, co, h * wd)
                gx = gw = None
                if x.requires_grad:
                    gx = Tensor(
                        np.matmul(w.data.reshape(co, c).T, gflat).reshape(x.shape)
                    )
                if w.requires_grad:
                    gw = Tensor(
                        np.matmul(gflat, x.data.reshape(n, c, h * wd).transpose(0, 2, 1))
                        .sum(axis=0)
                        .reshape(w.shape)
                    )
                return gx, gw
            gx = (
                Tensor(_conv2d_grad_x(x.shape, g.data, w.data, stride, padding, dilation))
                if x.requires_grad
                else None
            )
            gw = (
                Tensor(
                    _conv2d_grad_w(
                        x.data, g.data, w.shape, stride, padding, dilation,
                        cache.get("cols"),
                    )
                )
                if w.requires_grad
                else None
            )
            cache.clear()
            return gx, gw
        gx = gw = None
        sh, sw = stride
        ph, pw = padding
        dh, dw = dilation
        kh, kw = w.shape[2], w.shape[3]
        hp, wp = x.shape[2] + 2 * ph, x.shape[3] + 2 * pw
        if x.requires_grad:
            # Dilate the output grad by the stride, pad by the effective
            # kernel overhang, correlate with the flipped/transposed kernel.
            gd = dilate2d(g, (sh, sw))
            extra_h = hp - ((g.shape[2] - 1) * sh + (kh - 1) * dh + 1)
            extra_w = wp - ((g.shape[3] - 1) * sw + (kw - 1) * dw + 1)
            gd = pad2d(
                gd,
                (
                    ((kh - 1) * dh, (kh - 1) * dh + extra_h),
                    ((kw - 1) * dw, (kw - 1) * dw + extra_w),
                ),
            )
            wt = flip(w, (2, 3)).swapaxes(0, 1)
            gxp = conv2d(gd, wt, stride=1, padding=0, dilation=dilation)
            gx = getitem(
                gxp,
                (
                    slice(None),
                    slice(None),
                    slice(ph, ph + x.shape[2]),
                    slice(pw, pw + x.shape[3]),
                ),
            )
        if w.requires_grad:
            # Swap batch/channel roles so the weight grad is itself a conv.
            xt = pad2d(x, ((ph, ph), (pw, pw))).swapaxes(0, 1)
            gt = g.swapaxes(0, 1)
            gwt = conv2d(xt, gt, stride=dilation, padding=0, dilation=stride)
            gw = getitem(
                gwt, (slice(None), slice(None), slice(0, kh), slice(0, kw))
            ).swapaxes(0, 1)
        return gx, gw

    return _make(data, (x, w), bw)


# -- the engine -------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, seed: Tensor, create_graph: bool) -> dict[int, Tensor]:
    grads: dict[int, Tensor] = {id(root): seed}
    order = _toposort(root)
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward_fn is None:
                continue
            input_grads = node._backward_fn(g)
            for parent, ig in zip(node._inputs, input_grads):
                if ig is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = ig if prev is None else add(prev, ig)
    return grads


def backward(loss: Tensor, grad_output: Tensor | None = None) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `loss`.

    Repeated calls accumulate. `loss` must be a scalar unless an explicit
    `grad_output` of matching shape is given.
    """
    if grad_output is None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {loss.shape}"
            )
        grad_output = Tensor(np.ones_like(loss.data))
    if not loss.requires_grad:
        raise RuntimeError("backward() called on a tensor with no graph")
    grads = _run_backward(loss, grad_output, create_graph=False)
    for node in _toposort(loss):
        if node.is_leaf() and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                continue
            with no_grad():
                node.grad = g.detach() if node.grad is None else add(node.grad, g)


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    create_graph: bool = False,
) -> list[Tensor | None]:
    """Return d(output)/d(input) for each input without touching `.grad`."""
    if output.data.size != 1:
        raise ValueError(f"grad() requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise RuntimeError("grad() called on a tensor with no graph")
    seed = Tensor(np.ones_like(output.data))
    grads = _run_backward(output, seed, create_graph=create_graph)
    return [grads.get(id(t)) for t in inputs]


def free_graph(root: Tensor) -> None:
    """Drop all op records reachable from `root`; leaf grads are kept."""
    for node in _toposort(root):
        node._backward_fn = None
        node._inputs = ()
