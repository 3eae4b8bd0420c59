"""Neural-network operators on :class:`~maxvit_unet.tensor.Tensor`.

Image tensors are ``(B, C, H, W)``; the unbatched ``(C, H, W)`` form is accepted
by the spatial ops and returned in the same form. Convolution is
cross-correlation. Multiply-accumulate counts of the matmul/conv ops are
recorded into any active :func:`count_macs` context.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError
from .tensor import Tensor, make

# ------------------------------------------------------------ MAC counter --


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = defaultdict(int)
        self._scopes: list[str] = []

    def add(self, n: int) -> None:
        self.total += int(n)
        for s in self._scopes:
            self.by_scope[s] += int(n)


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulates of every matmul/linear/conv executed inside."""
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def mac_scope(name: str):
    """Attribute MACs executed inside the block to ``name`` as well as the total."""
    for c in _COUNTERS:
        c._scopes.append(name)
    try:
        yield
    finally:
        for c in _COUNTERS:
            c._scopes.remove(name)


def _count(n) -> None:
    for c in _COUNTERS:
        c.add(n)


def _batched(x: Tensor):
    """Return ``(x4d, was_3d)`` so spatial ops accept ``(C, H, W)`` inputs."""
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError("expected a (C, H, W) or (B, C, H, W) tensor", x.shape)
    return x, False


def _unbatched(y: Tensor, was_3d: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if was_3d else y


# ------------------------------------------------------------ dense algebra --


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` for ``(..., M, K) x (..., K, N)`` with equal batch extents."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul: incompatible operands", a.shape, b.shape)
    out = np.matmul(a.data, b.data)
    _count(out.size * a.shape[-1])

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``(in, out)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear: input width does not match weight", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear: bias length does not match weight", b.shape, w.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    _count(x2.shape[0] * w.shape[0] * w.shape[1])

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out.reshape(lead + (w.shape[1],)), parents, back)


# ------------------------------------------------------------- convolution --


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation. ``w`` is ``(C_out, C_in // groups, k, k)``."""
    x4, was_3d = _batched(x)
    bsz, cin, h, wd = x4.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported", w.shape)
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"conv2d: channels not compatible with groups={groups}", x4.shape, w.shape)
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input", x4.shape, w.shape)
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d: bias length must equal C_out", b.shape, (cout,))
    ho, wo = kernels.out_size(h, k, stride, padding), kernels.out_size(wd, k, stride, padding)
    xd, wdat = x4.data, w.data
    _count(bsz * cout * ho * wo * cin_g * k * k)

    if groups == 1 and k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        w2 = wdat.reshape(cout, cin)
        out = np.matmul(w2, xs.reshape(bsz, cin, ho * wo)).reshape(bsz, cout, ho, wo)

        def back_main(g):
            g3 = g.reshape(bsz, cout, ho * wo)
            gx = gw = None
            if x4.requires_grad:
                gxs = np.matmul(w2.T, g3).reshape(bsz, cin, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            if w.requires_grad:
                gw = np.einsum("bop,bip->oi", g3, xs.reshape(bsz, cin, ho * wo)).reshape(wdat.shape)
            return gx, gw

    elif groups == cin and cout == cin:
        out = kernels.depthwise_forward(xd, wdat[:, 0], stride, padding)

        def back_main(g):
            gx, gw = kernels.depthwise_backward(xd, wdat[:, 0], g, stride, padding)
            return gx, gw.reshape(wdat.shape)

    else:
        cout_g = cout // groups
        cols = [kernels.im2col(xd[:, gi * cin_g : (gi + 1) * cin_g], k, stride, padding) for gi in range(groups)]
        wmats = [wdat[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1) for gi in range(groups)]
        out = np.concatenate([np.matmul(wm, c) for wm, c in zip(wmats, cols)], axis=1)
        out = out.reshape(bsz, cout, ho, wo)

        def back_main(g):
            g3 = g.reshape(bsz, cout, ho * wo)
            gx = np.zeros_like(xd) if x4.requires_grad else None
            gw = np.zeros_like(wdat) if w.requires_grad else None
            for gi in range(groups):
                gg = g3[:, gi * cout_g : (gi + 1) * cout_g]
                if gw is not None:
                    gw[gi * cout_g : (gi + 1) * cout_g] = np.einsum(
                        "bop,bkp->ok", gg, cols[gi]).reshape(cout_g, cin_g, k, k)
                if gx is not None:
                    dcols = np.matmul(wmats[gi].T, gg)
                    gx[:, gi * cin_g : (gi + 1) * cin_g] = kernels.col2im(
                        dcols, (bsz, cin_g, h, wd), k, stride, padding)
            return gx, gw

    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gx, gw = back_main(g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x4, w, b) if b is not None else (x4, w)
    return _unbatched(make(out, parents, back), was_3d)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
                     padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``w`` is ``(C_in, C_out, k, k)``.

    Output extent is ``(H - 1) * stride - 2 * padding + k``.
    """
    x4, was_3d = _batched(x)
    bsz, cin, h, wd = x4.shape
    if w.ndim != 4 or w.shape[0] != cin or w.shape[2] != w.shape[3]:
        raise ShapeError("conv_transpose2d: weight must be (C_in, C_out, k, k)", x4.shape, w.shape)
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: empty output", x4.shape, w.shape)
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv_transpose2d: bias length must equal C_out", b.shape, (cout,))
    xd = x4.data
    w2 = w.data.reshape(cin, cout * k * k)
    x3 = xd.reshape(bsz, cin, h * wd)
    cols = np.matmul(w2.T, x3)  # (B, C_out*k*k, H*W)
    _count(bsz * cin * h * wd * cout * k * k)
    tiled = k == stride and padding == 0
    if tiled:
        out = cols.reshape(bsz, cout, k, k, h, wd).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, cout, ho, wo)
    else:
        out = kernels.col2im(cols, (bsz, cout, ho, wo), k, stride, padding)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        if tiled:
            gcols = g.reshape(bsz, cout, h, k, wd, k).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, cout * k * k, h * wd)
        else:
            gcols = kernels.im2col(g, k, stride, padding)
        gx = np.matmul(w2, gcols).reshape(xd.shape) if x4.requires_grad else None
        gw = np.einsum("bip,bkp->ik", x3, gcols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x4, w, b) if b is not None else (x4, w)
    return _unbatched(make(out, parents, back), was_3d)


# --------------------------------------------------------------- norms ------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, like common frameworks).
    """
    x4, was_3d = _batched(x)
    c = x4.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("batchnorm2d: per-channel parameters must have length C", gamma.shape, (c,))
    xd = x4.data
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = (xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(xd.dtype, copy=False)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx.astype(xd.dtype, copy=False), gg, gb

    return _unbatched(make(out, (x4, gamma, beta), back), was_3d)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last (channel) axis, then apply the affine map."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layernorm: affine parameters must match the channel axis", gamma.shape, (c,))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv / c * (c * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return make(out, (x, gamma, beta), back)


# ------------------------------------------------------------- softmax ------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; raises :class:`NumericError` on NaN input."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax received NaN input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log_softmax received NaN input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), back)


# ------------------------------------------------------------- pooling ------


def pool2d(x: Tensor, kind: str = "max", kernel: int = 2, stride: int | None = None) -> Tensor:
    x4, was_3d = _batched(x)
    stride = stride or kernel
    shape = x4.shape
    if kernel > shape[2] or kernel > shape[3]:
        raise ShapeError("pool2d: kernel larger than input", shape, (kernel, kernel))
    if kind == "max":
        out, arg = kernels.maxpool_forward(x4.data, kernel, stride)

        def back(g):
            return (kernels.maxpool_backward(g, arg, shape, kernel, stride),)

    elif kind == "avg":
        ho, wo = kernels.out_size(shape[2], kernel, stride, 0), kernels.out_size(shape[3], kernel, stride, 0)
        out = np.zeros(shape[:2] + (ho, wo), dtype=x4.dtype)
        for i in range(kernel):
            for j in range(kernel):
                out += x4.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        out /= kernel * kernel

        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gs = g / (kernel * kernel)
            for i in range(kernel):
                for j in range(kernel):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
            return (gx,)

    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _unbatched(make(out, (x4,), back), was_3d)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, keeping singleton ``H`` and ``W`` axes."""
    x4, was_3d = _batched(x)
    return _unbatched(x4.mean(axis=(2, 3), keepdims=True), was_3d)
