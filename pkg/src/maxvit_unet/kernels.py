"""Hot inner loops of the tensor engine.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The numba path is used when numba imports and ``MAXVIT_UNET_NUMBA`` is not set
to ``0``; :func:`set_backend` switches at runtime (tests and benchmarks use it).

Kernels work on 4-D ``(B, C, H, W)`` float arrays and never allocate autograd
state; they are plain array-in, array-out functions.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False
    warnings.warn("numba could not be imported; using the numpy kernels")

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _initial_backend() -> str:
    flag = os.environ.get("MAXVIT_UNET_NUMBA", "1").strip().lower()
    if not HAVE_NUMBA or flag in ("0", "false", "no", "off"):
        return "numpy"
    return "numba"


_BACKEND = _initial_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    previous, _BACKEND = _BACKEND, name
    return previous


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col ----


def _im2col_np(x, k, stride, pad):
    b, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * k * k, ho * wo)


@njit(cache=True)
def _im2col_nb(x, k, stride, pad):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((b, c * k * k, ho * wo), dtype=x.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                cols[n, row, oy * wo + ox] = x[n, ch, iy, ix]
    return cols


def _col2im_np(cols, shape, k, stride, pad):
    b, c, h, w = shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


@njit(cache=True)
def _col2im_nb(cols, b, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x = np.zeros((b, c, h, w), dtype=cols.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                x[n, ch, iy, ix] += cols[n, row, oy * wo + ox]
    return x


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``(B, C, H, W)`` into ``(B, C*k*k, H'*W')`` patch columns."""
    if _BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad)
    return _im2col_np(x, k, stride, pad)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto a ``shape`` image."""
    if _BACKEND == "numba":
        b, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols), b, c, h, w, k, stride, pad)
    return _col2im_np(cols, shape, k, stride, pad)


# ------------------------------------------------------------- depthwise ----


def _dw_forward_np(x, w, stride, pad):
    b, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += patch * w[:, i, j][None, :, None, None]
    return out


def _dw_backward_np(x, w, gout, stride, pad):
    b, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, i, j] = np.einsum("bchw,bchw->c", gout, xp[sl])
            gxp[sl] += gout * w[:, i, j][None, :, None, None]
    return gxp[:, :, pad : pad + h, pad : pad + wd], gw


@njit(cache=True, fastmath=True)
def _dw_forward_nb(xp, w, stride, ho, wo):
    # xp is already zero-padded; the innermost loop runs along an output row
    b, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for i in range(k):
                    iy = oy * stride + i
                    for j in range(k):
                        wv = w[ch, i, j]
                        for ox in range(wo):
                            out[n, ch, oy, ox] += wv * xp[n, ch, iy, ox * stride + j]
    return out


@njit(cache=True, fastmath=True)
def _dw_backward_nb(xp, w, gout, stride):
    b, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    ho, wo = gout.shape[2], gout.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for i in range(k):
                    iy = oy * stride + i
                    for j in range(k):
                        wv = w[ch, i, j]
                        acc = gw[ch, i, j]
                        for ox in range(wo):
                            g = gout[n, ch, oy, ox]
                            acc += g * xp[n, ch, iy, ox * stride + j]
                            gxp[n, ch, iy, ox * stride + j] += g * wv
                        gw[ch, i, j] = acc
    return gxp, gw


def _padded(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)


def depthwise_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Per-channel cross-correlation; ``w`` has shape ``(C, k, k)``."""
    if _BACKEND == "numba":
        k = w.shape[-1]
        ho, wo = out_size(x.shape[2], k, stride, pad), out_size(x.shape[3], k, stride, pad)
        return _dw_forward_nb(_padded(x, pad), np.ascontiguousarray(w), stride, ho, wo)
    return _dw_forward_np(x, w, stride, pad)


def depthwise_backward(x, w, gout, stride: int, pad: int):
    """Gradients ``(d x, d w)`` of :func:`depthwise_forward`."""
    if _BACKEND == "numba":
        h, wd = x.shape[2], x.shape[3]
        gxp, gw = _dw_backward_nb(_padded(x, pad), np.ascontiguousarray(w), np.ascontiguousarray(gout), stride)
        return gxp[:, :, pad : pad + h, pad : pad + wd], gw
    return _dw_backward_np(x, w, gout, stride, pad)


# --------------------------------------------------------------- maxpool ----


def _maxpool_forward_np(x, k, stride):
    b, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, 0), out_size(w, k, stride, 0)
    out = np.full((b, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((b, c, ho, wo), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            better = patch > out
            out = np.where(better, patch, out)
            arg = np.where(better, i * k + j, arg)
    return out, arg


def _maxpool_backward_np(gout, arg, shape, k, stride):
    gx = np.zeros(shape, dtype=gout.dtype)
    ho, wo = gout.shape[2], gout.shape[3]
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(
                arg == i * k + j, gout, 0
            )
    return gx


@njit(cache=True)
def _maxpool_forward_nb(x, k, stride):
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    arg = np.zeros((b, c, ho, wo), dtype=np.int64)
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[n, ch, oy * stride + i, ox * stride + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[n, ch, oy, ox] = best
                    arg[n, ch, oy, ox] = bi
    return out, arg


@njit(cache=True)
def _maxpool_backward_nb(gout, arg, b, c, h, w, k, stride):
    gx = np.zeros((b, c, h, w), dtype=gout.dtype)
    ho, wo = gout.shape[2], gout.shape[3]
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    a = arg[n, ch, oy, ox]
                    gx[n, ch, oy * stride + a // k, ox * stride + a % k] += gout[n, ch, oy, ox]
    return gx


def maxpool_forward(x: np.ndarray, k: int, stride: int):
    """Max pooling; returns the pooled map and the in-window argmax (first max wins)."""
    if _BACKEND == "numba":
        return _maxpool_forward_nb(np.ascontiguousarray(x), k, stride)
    return _maxpool_forward_np(x, k, stride)


def maxpool_backward(gout, arg, shape, k: int, stride: int) -> np.ndarray:
    if _BACKEND == "numba":
        b, c, h, w = shape
        return _maxpool_backward_nb(np.ascontiguousarray(gout), arg, b, c, h, w, k, stride)
    return _maxpool_backward_np(gout, arg, shape, k, stride)
