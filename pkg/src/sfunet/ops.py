"""Differentiable primitives over rank-4 real tensors.

Every operation computes its result eagerly with numpy and, when a gradient
tape is active, records a closure implementing its backward rule. Convolution
uses the cross-correlation convention (no kernel flip). Conv buffers are
chunked over output rows so intermediate im2col matrices stay bounded.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import RealTensor4, active_tape

# im2col scratch budget, in scalars (~64 MiB of float64)
_COL_CHUNK_SCALARS = 1 << 23


def _wrap(arr: np.ndarray) -> RealTensor4:
    return RealTensor4(arr, copy=False)


def _rec(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _require_dims(t, dims, what: str) -> None:
    if t.dims != tuple(dims):
        raise ShapeError(f"{what}: expected dims {tuple(dims)}, got {t.dims}")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, bias, stride, padding):
    n, cin, h, w = x.dims
    cout, cw, kh, kw = weight.dims
    if cw != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input dims {x.dims} carry {cin} channels "
            f"but weight dims {weight.dims} expect {cw}"
        )
    _require_dims(bias, (1, cout, 1, 1), "conv2d bias")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return n, cin, h, w, cout, kh, kw, ho, wo


def _row_chunks(ho: int, scalars_per_row: int):
    rows = max(1, _COL_CHUNK_SCALARS // max(1, scalars_per_row))
    for r0 in range(0, ho, rows):
        yield r0, min(r0 + rows, ho)


def conv2d(x: RealTensor4, weight: RealTensor4, bias: RealTensor4, stride: int = 1, padding: int = 0) -> RealTensor4:
    """Cross-correlation with bias, output H' = floor((H+2p-kh)/stride)+1."""
    n, cin, h, w, cout, kh, kw, ho, wo = _conv_geometry(x, weight, bias, stride, padding)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # windows view: [N, C, Ho_full, Wo_full, kh, kw] strided by `stride`
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ckk = cin * kh * kw
    w2 = wd.reshape(cout, ckk)
    out = np.empty((n, cout, ho, wo), dtype=xd.dtype)
    for r0, r1 in _row_chunks(ho, ckk * n * wo):
        cols = win[:, :, r0:r1].transpose(1, 4, 5, 0, 2, 3).reshape(ckk, n * (r1 - r0) * wo)
        res = (w2 @ cols).reshape(cout, n, r1 - r0, wo)
        out[:, :, r0:r1] = res.transpose(1, 0, 2, 3)
    out += bias.data.reshape(1, cout, 1, 1)
    t = _wrap(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        gw = np.zeros((cout, ckk), dtype=wd.dtype)
        gxp = np.zeros_like(xp)
        for r0, r1 in _row_chunks(ho, ckk * n * wo):
            cols = win[:, :, r0:r1].transpose(1, 4, 5, 0, 2, 3).reshape(ckk, n * (r1 - r0) * wo)
            gflat = g[:, :, r0:r1].transpose(1, 0, 2, 3).reshape(cout, n * (r1 - r0) * wo)
            gw += gflat @ cols.T
            gcols = (w2.T @ gflat).reshape(cin, kh, kw, n, r1 - r0, wo)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki + r0 * stride : ki + (r1 - 1) * stride + 1 : stride,
                        kj : kj + (wo - 1) * stride + 1 : stride] += gcols[:, ki, kj].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw.reshape(wd.shape), gb

    return _rec(t, (x, weight, bias), backward)


def conv_transpose2d(x: RealTensor4, weight: RealTensor4, bias: RealTensor4) -> RealTensor4:
    """2x upsampling transposed convolution, kernel 2x2, stride 2.

    Each input pixel scatters weight*x into a non-overlapping 2x2 output
    patch (the gradient-of-convolution operator).
    """
    n, cin, h, w = x.dims
    ci2, cout, kh, kw = weight.dims
    if ci2 != cin:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input dims {x.dims} carry {cin} channels "
            f"but weight dims {weight.dims} expect {ci2}"
        )
    if (kh, kw) != (2, 2):
        raise ShapeError(f"conv_transpose2d supports 2x2 kernels only, got {kh}x{kw}")
    _require_dims(bias, (1, cout, 1, 1), "conv_transpose2d bias")
    xd, wd = x.data, weight.data
    t6 = np.tensordot(xd, wd, axes=([1], [0]))  # [N,H,W,Cout,2,2]
    out = t6.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w).copy()
    out += bias.data.reshape(1, cout, 1, 1)
    t = _wrap(out)

    def backward(g):
        g6 = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # [N,H,W,Cout,2,2]
        gx = np.tensordot(g6, wd, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 1, 2]))
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return np.ascontiguousarray(gx), gw, gb

    return _rec(t, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling


def maxpool2(x: RealTensor4) -> RealTensor4:
    """2x2 max pooling; backward routes to the argmax (first index on ties)."""
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    t = _wrap(np.ascontiguousarray(out))

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _rec(t, (x,), backward)


def global_avg_pool(x: RealTensor4) -> RealTensor4:
    """Spatial mean per channel: [N,C,H,W] -> [N,C,1,1]."""
    n, c, h, w = x.dims
    out = x.data.mean(axis=(2, 3), keepdims=True)
    t = _wrap(out)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.dims).copy(),)

    return _rec(t, (x,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: RealTensor4) -> RealTensor4:
    out = np.maximum(x.data, 0)
    t = _wrap(out)

    def backward(g):
        return (g * (x.data > 0),)

    return _rec(t, (x,), backward)


def _sigmoid_stable(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: RealTensor4) -> RealTensor4:
    s = _sigmoid_stable(x.data)
    t = _wrap(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _rec(t, (x,), backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: RealTensor4, b: RealTensor4) -> RealTensor4:
    na, ca, ha, wa = a.dims
    nb, cb, hb, wb = b.dims
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: non-channel dims differ, {a.dims} vs {b.dims}")
    t = _wrap(np.concatenate((a.data, b.data), axis=1))

    def backward(g):
        return g[:, :ca].copy(), g[:, ca:].copy()

    return _rec(t, (a, b), backward)


def split_channels(x: RealTensor4, at: int) -> tuple[RealTensor4, RealTensor4]:
    n, c, h, w = x.dims
    if not 0 < at < c:
        raise ShapeError(f"split_channels: split point {at} outside (0, {c})")
    ta = _wrap(x.data[:, :at].copy())
    tb = _wrap(x.data[:, at:].copy())

    def backward_a(g):
        gx = np.zeros(x.dims, dtype=g.dtype)
        gx[:, :at] = g
        return (gx,)

    def backward_b(g):
        gx = np.zeros(x.dims, dtype=g.dtype)
        gx[:, at:] = g
        return (gx,)

    _rec(ta, (x,), backward_a)
    _rec(tb, (x,), backward_b)
    return ta, tb


def broadcast_mul(x: RealTensor4, a: RealTensor4) -> RealTensor4:
    """Elementwise product; ``a`` may broadcast along any size-1 axes."""
    for da, dx in zip(a.dims, x.dims):
        if da not in (1, dx):
            raise ShapeError(f"broadcast_mul: dims {a.dims} do not broadcast onto {x.dims}")
    reduce_axes = tuple(i for i, (da, dx) in enumerate(zip(a.dims, x.dims)) if da == 1 and dx > 1)
    t = _wrap(x.data * a.data)

    def backward(g):
        gx = g * a.data
        ga = g * x.data
        if reduce_axes:
            ga = ga.sum(axis=reduce_axes, keepdims=True)
        return gx, ga

    return _rec(t, (x, a), backward)


def add(x: RealTensor4, y: RealTensor4) -> RealTensor4:
    if x.dims != y.dims:
        raise ShapeError(f"add: dims differ, {x.dims} vs {y.dims}")
    t = _wrap(x.data + y.data)

    def backward(g):
        return g, g

    return _rec(t, (x, y), backward)


# ---------------------------------------------------------------------------
# interpolation


def _interp_axis(n: int):
    """Source indices/weights for 2x bilinear upsampling, half-pixel centers."""
    pos = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac


_INTERP_MATS: dict[tuple[int, object], np.ndarray] = {}


def _interp_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] row-stochastic matrix realizing the 2x bilinear sampling."""
    key = (n, np.dtype(dtype))
    mat = _INTERP_MATS.get(key)
    if mat is None:
        i0, i1, frac = _interp_axis(n)
        mat = np.zeros((2 * n, n), dtype=np.float64)
        rows = np.arange(2 * n)
        np.add.at(mat, (rows, i0), 1.0 - frac)
        np.add.at(mat, (rows, i1), frac)
        mat = np.ascontiguousarray(mat.astype(dtype))
        _INTERP_MATS[key] = mat
    return mat


def interpolate2x(x: RealTensor4) -> RealTensor4:
    """Bilinear 2x upsampling (align_corners=false convention).

    Realized as a pair of per-axis matrix products so the backward pass is
    the exact transpose.
    """
    n, c, h, w = x.dims
    ay = _interp_matrix(h, x.dtype)
    ax = _interp_matrix(w, x.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = (ay @ flat) @ ax.T
    t = _wrap(out.reshape(n, c, 2 * h, 2 * w))

    def backward(g):
        gx = (ay.T @ g.reshape(n * c, 2 * h, 2 * w)) @ ax
        return (np.ascontiguousarray(gx.reshape(n, c, h, w)),)

    return _rec(t, (x,), backward)


# ---------------------------------------------------------------------------
# channel statistics (spatial attention inputs)


def channel_max(x: RealTensor4) -> RealTensor4:
    """Max over channels: [N,C,H,W] -> [N,1,H,W]; ties route to first channel."""
    idx = x.data.argmax(axis=1, keepdims=True)
    out = np.take_along_axis(x.data, idx, axis=1)
    t = _wrap(out)

    def backward(g):
        gx = np.zeros(x.dims, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _rec(t, (x,), backward)


def channel_mean(x: RealTensor4) -> RealTensor4:
    """Mean over channels: [N,C,H,W] -> [N,1,H,W]."""
    c = x.dims[1]
    t = _wrap(x.data.mean(axis=1, keepdims=True))

    def backward(g):
        return (np.broadcast_to(g / c, x.dims).copy(),)

    return _rec(t, (x,), backward)


# ---------------------------------------------------------------------------
# reductions / scalar plumbing


def sum_all(x: RealTensor4) -> RealTensor4:
    """Sum of all elements as a [1,1,1,1] scalar tensor."""
    t = _wrap(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype))

    def backward(g):
        return (np.full(x.dims, g.reshape(())[()], dtype=g.dtype),)

    return _rec(t, (x,), backward)


def scale(x: RealTensor4, c: float) -> RealTensor4:
    t = _wrap(x.data * c)

    def backward(g):
        return (g * c,)

    return _rec(t, (x,), backward)
