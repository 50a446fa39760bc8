"""2D discrete Fourier analysis of feature maps.

Forward/inverse transforms follow the unnormalized-forward / (1/HW)-inverse
convention. Power-of-two lengths use an iterative radix-2 kernel; other
lengths use the Bluestein chirp-z algorithm on a padded power-of-two length,
so arbitrary feature-map sizes (e.g. 224, 112, 56, 28) stay O(n log n).
All transforms run in complex128 internally and are cast to the caller's
precision, keeping single-precision pipelines within their tolerances.

Low/high frequency masks live in centered coordinates (DC at H//2, W//2);
spectra are shifted, masked/filtered, then unshifted before the inverse
transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    ComplexTensor4,
    Parameter,
    RealTensor4,
    active_tape,
    complex_for,
    real_for,
)

# ---------------------------------------------------------------------------
# FFT core

_BITREV: dict[int, np.ndarray] = {}
_TWIDDLE: dict[int, np.ndarray] = {}
_BLUESTEIN: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _bitrev_perm(n: int) -> np.ndarray:
    perm = _BITREV.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            perm[i] = r
        _BITREV[n] = perm
    return perm


def _twiddle(m: int) -> np.ndarray:
    tw = _TWIDDLE.get(m)
    if tw is None:
        tw = np.exp(-2j * np.pi * np.arange(m // 2) / m)
        _TWIDDLE[m] = tw
    return tw


def _fft_pow2_last(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 DIT FFT along the last axis (length must be 2**k)."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    a = a[..., _bitrev_perm(n)]  # fancy index copies, so in-place stages are safe
    m = 2
    while m <= n:
        half = m // 2
        b = a.reshape(a.shape[:-1] + (n // m, m))
        t = b[..., half:] * _twiddle(m)
        b[..., half:] = b[..., :half] - t
        b[..., :half] += t
        m *= 2
    return a


def _bluestein_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    tables = _BLUESTEIN.get(n)
    if tables is None:
        k = np.arange(n)
        chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
        m = 1 << (2 * n - 1).bit_length()
        b = np.zeros(m, dtype=np.complex128)
        b[:n] = np.conj(chirp)
        b[m - (n - 1):] = np.conj(chirp[1:])[::-1]
        tables = (chirp, _fft_pow2_last(b))
        _BLUESTEIN[n] = tables
    return tables


def _fft_bluestein_last(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    chirp, bf = _bluestein_tables(n)
    m = bf.shape[-1]
    buf = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    buf[..., :n] = a * chirp
    conv = np.conj(_fft_pow2_last(np.conj(_fft_pow2_last(buf) * bf))) / m
    return conv[..., :n] * chirp


def _fft_last(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if n & (n - 1) == 0:
        return _fft_pow2_last(a)
    return _fft_bluestein_last(a)


def _fft2(a: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the trailing two axes."""
    a = _fft_last(np.ascontiguousarray(a, dtype=np.complex128))
    a = _fft_last(np.ascontiguousarray(a.swapaxes(-1, -2)))
    return np.ascontiguousarray(a.swapaxes(-1, -2))


def _ifft2(a: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_fft2`, normalized by 1/(H*W)."""
    h, w = a.shape[-2:]
    return np.conj(_fft2(np.conj(a))) / (h * w)


# ---------------------------------------------------------------------------
# differentiable spectral ops


def _wrapc(arr: np.ndarray) -> ComplexTensor4:
    return ComplexTensor4(arr, copy=False)


def _rec(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def dft2(x: RealTensor4) -> ComplexTensor4:
    """f(U,V) = sum_xy x(x,y) * exp(-j*2*pi*(U*x/H + V*y/W)), per (n,c) plane."""
    cdtype = complex_for[x.dtype]
    f = _fft2(x.data)
    t = _wrapc(f.astype(cdtype, copy=False))

    def backward(g):
        # adjoint of the forward transform: unnormalized inverse, real part
        gx = np.conj(_fft2(np.conj(g))).real
        return (gx.astype(x.dtype, copy=False),)

    return _rec(t, (x,), backward)


def idft2(f: ComplexTensor4) -> ComplexTensor4:
    """x(x,y) = (1/HW) * sum_UV f(U,V) * exp(+j*2*pi*(U*x/H + V*y/W))."""
    h, w = f.dims[2], f.dims[3]
    out = _ifft2(f.data)
    t = _wrapc(out.astype(f.dtype, copy=False))

    def backward(g):
        return ((_fft2(g) / (h * w)).astype(f.dtype, copy=False),)

    return _rec(t, (f,), backward)


def take_real(f: ComplexTensor4) -> RealTensor4:
    """Drop imaginary parts; backward injects gradient into real components."""
    rdtype = real_for[f.dtype]
    t = RealTensor4(f.data.real.astype(rdtype, copy=True), copy=False)

    def backward(g):
        return (g.astype(f.dtype),)

    return _rec(t, (f,), backward)


def fftshift2(f: ComplexTensor4) -> ComplexTensor4:
    """Permute the spectrum so DC lands at (H//2, W//2)."""
    h, w = f.dims[2], f.dims[3]
    t = _wrapc(np.roll(f.data, (h // 2, w // 2), axis=(2, 3)))

    def backward(g):
        return (np.roll(g, (-(h // 2), -(w // 2)), axis=(2, 3)),)

    return _rec(t, (f,), backward)


def ifftshift2(f: ComplexTensor4) -> ComplexTensor4:
    h, w = f.dims[2], f.dims[3]
    t = _wrapc(np.roll(f.data, (-(h // 2), -(w // 2)), axis=(2, 3)))

    def backward(g):
        return (np.roll(g, (h // 2, w // 2), axis=(2, 3)),)

    return _rec(t, (f,), backward)


def complex_add(a: ComplexTensor4, b: ComplexTensor4) -> ComplexTensor4:
    if a.dims != b.dims:
        raise ShapeError(f"complex_add: dims differ, {a.dims} vs {b.dims}")
    t = _wrapc(a.data + b.data)

    def backward(g):
        return g, g

    return _rec(t, (a, b), backward)


def complex_abs2(f: ComplexTensor4) -> RealTensor4:
    """Elementwise squared magnitude |z|^2 as a real tensor."""
    rdtype = real_for[f.dtype]
    t = RealTensor4((f.data.real**2 + f.data.imag**2).astype(rdtype, copy=False), copy=False)

    def backward(g):
        return (2.0 * g * f.data,)

    return _rec(t, (f,), backward)


# ---------------------------------------------------------------------------
# masks and the learnable global filter


@dataclass(frozen=True)
class FreqMaskPair:
    """Complementary binary masks over the centered spectrum.

    ``low`` carries a side_n x side_n square of ones centered at the DC bin;
    ``high`` is its exact complement.
    """

    low: np.ndarray
    high: np.ndarray
    side_n: int

    def __post_init__(self):
        if not np.array_equal(self.low + self.high, np.ones_like(self.low)):
            raise ShapeError("mask pair must sum to the all-ones array")
        if np.any(self.low * self.high):
            raise ShapeError("mask pair must have disjoint support")


def build_masks(h: int, w: int, rho: float) -> FreqMaskPair:
    """Low/high masks with n = max(1, floor(rho*min(H,W))) in centered order."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"mask_rho must lie in (0, 1], got {rho}")
    if h < 1 or w < 1:
        raise ShapeError(f"mask dims must be positive, got {h}x{w}")
    n = max(1, int(np.floor(rho * min(h, w))))
    low = np.zeros((h, w), dtype=np.float64)
    r0 = h // 2 - n // 2
    c0 = w // 2 - n // 2
    low[r0 : r0 + n, c0 : c0 + n] = 1.0
    return FreqMaskPair(low=low, high=1.0 - low, side_n=n)


def apply_mask(f: ComplexTensor4, mask: np.ndarray) -> ComplexTensor4:
    """Elementwise complex*real product, broadcast over batch and channels."""
    h, w = f.dims[2], f.dims[3]
    if mask.shape != (h, w):
        raise ShapeError(f"apply_mask: mask shape {mask.shape} does not match spectrum {h}x{w}")
    m = mask.astype(real_for[f.dtype], copy=False)
    t = _wrapc(f.data * m)

    def backward(g):
        return (g * m,)

    return _rec(t, (f,), backward)


class GlobalFilter:
    """Adaptive learnable per-frequency multiplier for the low band.

    ``broadcast`` mode shares one [H,W] plane across channels; ``per-channel``
    keeps an independent plane per channel. Values start at 1 (identity).
    """

    MODES = ("broadcast", "per-channel")

    def __init__(self, mode: str, param: Parameter):
        if mode not in self.MODES:
            raise ConfigError(f"filter mode must be one of {self.MODES}, got '{mode}'")
        n, c, _, _ = param.dims
        if n != 1 or (mode == "broadcast" and c != 1):
            raise ShapeError(f"filter dims {param.dims} incompatible with mode '{mode}'")
        self.mode = mode
        self.param = param

    @property
    def dims(self):
        return self.param.dims


def apply_filter(f: ComplexTensor4, filt: GlobalFilter) -> ComplexTensor4:
    """Multiply the spectrum with the real filter values; differentiable in both."""
    values = filt.param.value
    _, cf, hf, wf = values.dims
    n, c, h, w = f.dims
    if (hf, wf) != (h, w) or cf not in (1, c):
        raise ShapeError(f"apply_filter: filter dims {values.dims} do not match spectrum dims {f.dims}")
    vd = values.data
    t = _wrapc(f.data * vd)
    reduce_axes = (0, 1) if cf == 1 and c > 1 else (0,)

    def backward(g):
        gf = g * vd
        gv = (g * np.conj(f.data)).real.sum(axis=reduce_axes, keepdims=True)
        return gf, gv.astype(vd.dtype, copy=False)

    return _rec(t, (f, values), backward)


# ---------------------------------------------------------------------------
# spectrum dumps (CLI `spectrum` command)


def _to_u8(img: np.ndarray) -> np.ndarray:
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.round(255.0 * img).astype(np.uint8)


def spectrum_images(masks: FreqMaskPair, filt: GlobalFilter) -> dict[str, np.ndarray]:
    """8-bit grayscale renderings: binary masks plus log-scaled filter magnitude.

    Per-channel filters are reduced to their mean magnitude plane.
    """
    mag = np.abs(filt.param.value.data[0]).mean(axis=0)
    return {
        "mask_low": _to_u8(masks.low.copy()),
        "mask_high": _to_u8(masks.high.copy()),
        "filter": _to_u8(np.log1p(mag)),
    }
