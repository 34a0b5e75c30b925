"""Independent oracles and gradient-check utilities shared by the tests.

Everything here is deliberately naive (plain loops) and written against
the mathematical definitions, never against the library internals.
"""

from __future__ import annotations

import numpy as np

from maskgrid.tensor import Tensor


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Six-loop reference convolution (cross-correlation)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for ni in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(ci):
                        for a in range(kh):
                            for b in range(kw):
                                acc += xp[ni, cc, i * stride + a, j * stride + b] * w[o, cc, a, b]
                    out[ni, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def naive_matmul(a, b):
    """Triple-loop reference matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_attention(q, k, v):
    """Explicit-loop scaled dot-product attention over (N, h, L, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, heads, L, d = q.shape
    out = np.zeros_like(q)
    for ni in range(n):
        for h in range(heads):
            scores = np.zeros((L, L))
            for i in range(L):
                for j in range(L):
                    scores[i, j] = q[ni, h, i] @ k[ni, h, j] / np.sqrt(d)
            for i in range(L):
                e = np.exp(scores[i] - scores[i].max())
                p = e / e.sum()
                out[ni, h, i] = p @ v[ni, h]
    return out


def naive_partial_conv(x, mask, w, bias, stride=1, padding=None):
    """Per-window reference of the count-normalized partial convolution."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    co, ci, kh, kw = w.shape
    if padding is None:
        padding = (kh - 1) // 2
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    new_mask = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            vis = 0.0
            for a in range(kh):
                for b in range(kw):
                    y, xx = i * stride + a - padding, j * stride + b - padding
                    if 0 <= y < h and 0 <= xx < wid and mask[y, xx]:
                        vis += 1.0
            if vis > 0:
                new_mask[i, j] = 1
            for ni in range(n):
                for o in range(co):
                    if vis == 0:
                        continue
                    acc = 0.0
                    for cc in range(ci):
                        for a in range(kh):
                            for b in range(kw):
                                y, xx = i * stride + a - padding, j * stride + b - padding
                                if 0 <= y < h and 0 <= xx < wid and mask[y, xx]:
                                    acc += x[ni, cc, y, xx] * w[o, cc, a, b]
                    out[ni, o, i, j] = acc / vis + (bias[o] if bias is not None else 0.0)
    return out, new_mask


def naive_restrictive_conv(x, mask, w, bias, alpha):
    """Per-window reference of the alpha-gated restrictive convolution.

    Window area at the borders counts only in-bounds cells, matching the
    library's convention.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    co, ci, kh, kw = w.shape
    padding = (kh - 1) // 2
    out = np.zeros((n, co, h, wid))
    for i in range(h):
        for j in range(wid):
            vis = 0.0
            area = 0.0
            for a in range(kh):
                for b in range(kw):
                    y, xx = i + a - padding, j + b - padding
                    if 0 <= y < h and 0 <= xx < wid:
                        area += 1.0
                        if mask[y, xx]:
                            vis += 1.0
            if vis / area < alpha - 1e-7:
                continue
            for ni in range(n):
                for o in range(co):
                    acc = 0.0
                    for cc in range(ci):
                        for a in range(kh):
                            for b in range(kw):
                                y, xx = i + a - padding, j + b - padding
                                if 0 <= y < h and 0 <= xx < wid and mask[y, xx]:
                                    acc += x[ni, cc, y, xx] * w[o, cc, a, b]
                    out[ni, o, i, j] = acc / vis + (bias[o] if bias is not None else 0.0)
    return out


def naive_downsample_mask(mask, alpha, window=2):
    mask = np.asarray(mask)
    h, w = mask.shape
    out = np.zeros((h // window, w // window), dtype=np.uint8)
    for i in range(h // window):
        for j in range(w // window):
            block = mask[i * window : (i + 1) * window, j * window : (j + 1) * window]
            if block.mean() >= alpha - 1e-7:
                out[i, j] = 1
    return out


def finite_difference(f, arr, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. the array in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(build, arrays, rel_tol=1e-3, h=1e-3):
    """Compare reverse-mode grads of `build(tensors) -> scalar Tensor`
    against central differences for every input array.

    Returns the worst relative error seen. The comparison normalizes by
    the largest finite-difference magnitude (floored at 1) so float32
    forward noise does not dominate near-zero entries.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    worst = 0.0
    for t, arr in zip(tensors, arrays):
        fd = finite_difference(lambda: float(build([Tensor(a) for a in arrays]).data), arr, h=h)
        denom = max(1.0, float(np.abs(fd).max()))
        err = float(np.abs(t.grad.data - fd).max()) / denom
        worst = max(worst, err)
    return worst
