"""Pixel-level hot kernels: HU windowing, box downsampling, phantom rendering.

Each kernel exists twice: a scalar-loop version compiled with numba and a
vectorized numpy version. Both evaluate the same elementwise expressions in
the same order, so their outputs are bit-identical; which one runs is chosen
once at import time.

Backend selection: set ``SLICEWORLD_NUMBA=0`` to force the numpy path.
Default is numba when importable. ``benchmarks/kernel_bench.py`` compares
the two paths.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("SLICEWORLD_NUMBA", "1").strip().lower()
_numba_requested = _flag not in {"0", "off", "false", "no"}

if _numba_requested:
    try:
        import numba

        _numba_available = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _numba_available = False
else:
    _numba_available = False

NUMBA_ENABLED = _numba_requested and _numba_available


def backend_name() -> str:
    """Active kernel backend, 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# HU windowing: clip to [lo, lo + width], scale linearly to [0, 255],
# round half up. Inputs are float64 HU values; output is uint8.
# ---------------------------------------------------------------------------


def _window_u8_loop(hu, lo, width, out):
    h, w = hu.shape
    for i in range(h):
        for j in range(w):
            v = hu[i, j]
            if v < lo:
                v = lo
            elif v > lo + width:
                v = lo + width
            out[i, j] = np.uint8(math.floor(255.0 * (v - lo) / width + 0.5))
    return out


def _window_u8_numpy(hu, lo, width, out):
    v = np.clip(hu, lo, lo + width)
    np.floor(255.0 * (v - lo) / width + 0.5, out=v)
    out[...] = v.astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# Integer-factor box downsampling of a uint8 channel with round-half-up.
# Block sums are integer-exact in float64, so both paths agree bit-for-bit.
# ---------------------------------------------------------------------------


def _box_down_u8_loop(channel, factor, out):
    oh, ow = out.shape
    inv = 1.0 / (factor * factor)
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for bi in range(factor):
                for bj in range(factor):
                    acc += channel[i * factor + bi, j * factor + bj]
            out[i, j] = np.uint8(math.floor(acc * inv + 0.5))
    return out


def _box_down_u8_numpy(channel, factor, out):
    oh, ow = out.shape
    acc = np.zeros((oh, ow), dtype=np.float64)
    for bi in range(factor):
        for bj in range(factor):
            acc += channel[bi::factor, bj::factor].astype(np.float64)
    out[...] = np.floor(acc / (factor * factor) + 0.5).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# Phantom slice rendering. One call produces the noiseless HU image of a
# single slice from scalar geometry parameters plus an (n, 4) lesion array
# of rows (center_y, center_x, radius, amplitude), all in fractional
# coordinates. Purely elementwise per pixel; lesion contributions are summed
# in array order.
# ---------------------------------------------------------------------------

_AIR_HU = -1000.0
_TISSUE_HU = 30.0
_LUNG_HU = -600.0
_BONE_HU = 700.0
_LESION_HU_SCALE = 800.0


def _render_hu_loop(h, w, body_ry, body_rx, bone_frac, lung_cy, lung_cx,
                    lung_r, grad_gy, grad_gx, lesions, out):
    inner = (1.0 - bone_frac) * (1.0 - bone_frac)
    n_les = lesions.shape[0]
    for i in range(h):
        y = (i + 0.5) / h
        for j in range(w):
            x = (j + 0.5) / w
            dy = (y - 0.5) / body_ry
            dx = (x - 0.5) / body_rx
            rb = dy * dy + dx * dx
            if rb > 1.0:
                out[i, j] = _AIR_HU
                continue
            if rb > inner:
                out[i, j] = _BONE_HU
                continue
            hu = _TISSUE_HU + grad_gy * (y - 0.5) + grad_gx * (x - 0.5)
            ly = (y - lung_cy) / lung_r
            lx = (x - lung_cx) / lung_r
            if ly * ly + lx * lx <= 1.0:
                hu = _LUNG_HU
            for k in range(n_les):
                ey = y - lesions[k, 0]
                ex = x - lesions[k, 1]
                rad = lesions[k, 2]
                if ey * ey + ex * ex <= rad * rad:
                    hu += lesions[k, 3] * _LESION_HU_SCALE
            out[i, j] = hu
    return out


def _render_hu_numpy(h, w, body_ry, body_rx, bone_frac, lung_cy, lung_cx,
                     lung_r, grad_gy, grad_gx, lesions, out):
    y = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    x = (np.arange(w, dtype=np.float64)[None, :] + 0.5) / w
    dy = (y - 0.5) / body_ry
    dx = (x - 0.5) / body_rx
    rb = dy * dy + dx * dx

    hu = _TISSUE_HU + grad_gy * (y - 0.5) + grad_gx * (x - 0.5)
    hu = np.broadcast_to(hu, (h, w)).copy()
    ly = (y - lung_cy) / lung_r
    lx = (x - lung_cx) / lung_r
    hu[(ly * ly + lx * lx) <= 1.0] = _LUNG_HU
    for k in range(lesions.shape[0]):
        ey = y - lesions[k, 0]
        ex = x - lesions[k, 1]
        inside = (ey * ey + ex * ex) <= lesions[k, 2] * lesions[k, 2]
        hu[inside] += lesions[k, 3] * _LESION_HU_SCALE

    inner = (1.0 - bone_frac) * (1.0 - bone_frac)
    hu[rb > inner] = _BONE_HU
    hu[rb > 1.0] = _AIR_HU
    out[...] = hu
    return out


if NUMBA_ENABLED:
    _window_u8_fast = numba.njit(cache=True)(_window_u8_loop)
    _box_down_u8_fast = numba.njit(cache=True)(_box_down_u8_loop)
    _render_hu_fast = numba.njit(cache=True)(_render_hu_loop)
else:
    _window_u8_fast = None
    _box_down_u8_fast = None
    _render_hu_fast = None


def window_u8(hu: np.ndarray, lo: float, width: float) -> np.ndarray:
    """Window a float64 HU array into uint8 via the active backend."""
    out = np.empty(hu.shape, dtype=np.uint8)
    if NUMBA_ENABLED:
        return _window_u8_fast(hu, lo, width, out)
    return _window_u8_numpy(hu, lo, width, out)


def box_downsample_u8(channel: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a uint8 channel by an integer factor (box mean)."""
    h, w = channel.shape
    out = np.empty((h // factor, w // factor), dtype=np.uint8)
    if NUMBA_ENABLED:
        return _box_down_u8_fast(channel, factor, out)
    return _box_down_u8_numpy(channel, factor, out)


def render_hu_slice(h: int, w: int, body_ry: float, body_rx: float,
                    bone_frac: float, lung_cy: float, lung_cx: float,
                    lung_r: float, grad_gy: float, grad_gx: float,
                    lesions: np.ndarray) -> np.ndarray:
    """Render one noiseless phantom slice as float64 HU values."""
    out = np.empty((h, w), dtype=np.float64)
    lesions = np.ascontiguousarray(lesions, dtype=np.float64).reshape(-1, 4)
    if NUMBA_ENABLED:
        return _render_hu_fast(h, w, body_ry, body_rx, bone_frac, lung_cy,
                               lung_cx, lung_r, grad_gy, grad_gx, lesions, out)
    return _render_hu_numpy(h, w, body_ry, body_rx, bone_frac, lung_cy,
                            lung_cx, lung_r, grad_gy, grad_gx, lesions, out)


def area_resize_u8(channel: np.ndarray, side: int) -> np.ndarray:
    """Area-interpolated resize of a uint8 channel to ``side``x``side``.

    Integer downsampling factors use the exact box kernel; other ratios fall
    back to a general overlap-weighted average (numpy on every backend).
    Identity when the size already matches.
    """
    h, w = channel.shape
    if h == side and w == side:
        return channel.copy()
    if h == w and h % side == 0:
        return box_downsample_u8(channel, h // side)
    rw = _overlap_weights(h, side)
    cw = _overlap_weights(w, side)
    acc = rw @ channel.astype(np.float64) @ cw.T
    return np.floor(acc + 0.5).astype(np.uint8)


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalized interval-overlap matrix used for general area resize."""
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        lo = o * scale
        hi = (o + 1) * scale
        i0 = int(math.floor(lo))
        i1 = min(int(math.ceil(hi)), n_in)
        for i in range(i0, i1):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                weights[o, i] = overlap / scale
    return weights
