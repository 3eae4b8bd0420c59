"""MaxViT building blocks: squeeze-excitation, MBConv, window/grid partitioning,
relative-position multi-head self-attention, the feed-forward network and the
composite MaxViT block (MBConv -> window attention -> grid attention).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import ops
from .errors import ShapeError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, broadcast_to, gelu, mul, sigmoid


class SqueezeExcite(Module):
    """Channel gate: global pool -> 1x1 conv -> GELU -> 1x1 conv -> sigmoid -> rescale."""

    def __init__(self, rng, channels: int, squeeze: int | None = None, dtype=np.float32):
        squeeze = channels // 4 if squeeze is None else squeeze
        if squeeze < 1:
            raise ShapeError(f"squeeze-excitation on {channels} channels has an empty squeeze width",
                             (channels,))
        self.reduce = Conv2d(rng, channels, squeeze, 1, dtype=dtype)
        self.expand = Conv2d(rng, squeeze, channels, 1, dtype=dtype)

    def gate(self, z: Tensor) -> Tensor:
        return sigmoid(self.expand(gelu(self.reduce(ops.global_avg_pool(z)))))

    def forward(self, z: Tensor) -> Tensor:
        return mul(z, broadcast_to(self.gate(z), z.shape))


class MBConv(Module):
    """Inverted bottleneck with pre-norm, depthwise 3x3 and squeeze-excitation.

    stride 1: ``z + proj(se(dw(expand(bn(z)))))`` (1x1 shortcut projection when
    channels change); stride 2: the shortcut is a 1x1 projection of the
    2x2-max-pooled input and the depthwise conv carries the stride.
    """

    def __init__(self, rng, cin: int, cout: int, stride: int = 1, expansion: int = 4,
                 se_channels: int | None = None, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, got {stride}")
        mid = expansion * cin
        self.stride = stride
        self.pre_norm = BatchNorm2d(cin, dtype=dtype)
        self.expand = Conv2d(rng, cin, mid, 1, bias=False, dtype=dtype)
        self.expand_norm = BatchNorm2d(mid, dtype=dtype)
        self.dw = Conv2d(rng, mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False, dtype=dtype)
        self.dw_norm = BatchNorm2d(mid, dtype=dtype)
        self.se = SqueezeExcite(rng, mid, se_channels if se_channels is not None else mid // 4, dtype=dtype)
        self.proj = Conv2d(rng, mid, cout, 1, dtype=dtype)
        self.shortcut = Conv2d(rng, cin, cout, 1, dtype=dtype) if (stride == 2 or cin != cout) else None

    def residual(self, z: Tensor) -> Tensor:
        h = gelu(self.expand_norm(self.expand(self.pre_norm(z))))
        h = gelu(self.dw_norm(self.dw(h)))
        return self.proj(self.se(h))

    def forward(self, z: Tensor) -> Tensor:
        if self.stride == 2 and (z.shape[-1] % 2 or z.shape[-2] % 2):
            raise ShapeError("MBConv stride 2 needs even spatial extents", z.shape)
        if self.stride == 2:
            short = self.shortcut(ops.pool2d(z, "max", 2, 2))
        elif self.shortcut is not None:
            short = self.shortcut(z)
        else:
            short = z
        return short + self.residual(z)


# ------------------------------------------------------------ partitioning --


def _split_image(z: Tensor, size: int, what: str):
    z4 = z if z.ndim == 4 else z.reshape((1,) + z.shape)
    b, c, h, w = z4.shape
    if h % size or w % size:
        raise ShapeError(f"{what}: spatial extents must be divisible by {size}", z.shape)
    return z4, b, c, h, w


def window_partition(z: Tensor, size: int) -> Tensor:
    """``(B, C, H, W)`` -> ``(B*N, size*size, C)`` of non-overlapping tiles.

    Windows are ordered raster-wise over the tile grid, tokens raster-wise
    inside a tile, channels last. ``N = (H/size) * (W/size)``.
    """
    z4, b, c, h, w = _split_image(z, size, "window_partition")
    x = z4.reshape(b, c, h // size, size, w // size, size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b * (h // size) * (w // size), size * size, c)


def window_reverse(windows: Tensor, size: int, shape) -> Tensor:
    """Inverse of :func:`window_partition` back to ``shape`` (3-D or 4-D)."""
    shape = tuple(shape)
    b = 1 if len(shape) == 3 else shape[0]
    c, h, w = shape[-3:]
    x = windows.reshape(b, h // size, w // size, size, size, c)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(shape)


def grid_partition(z: Tensor, size: int) -> Tensor:
    """``(B, C, H, W)`` -> ``(B*N, size*size, C)`` of dilated sequences.

    Sequence ``n`` collects the ``size x size`` positions spaced ``(H/size, W/size)``
    apart, starting from offset ``n`` within the first cell; ``N = (H/size)*(W/size)``.
    """
    z4, b, c, h, w = _split_image(z, size, "grid_partition")
    x = z4.reshape(b, c, size, h // size, size, w // size)
    x = x.permute(0, 3, 5, 2, 4, 1)
    return x.reshape(b * (h // size) * (w // size), size * size, c)


def grid_reverse(seqs: Tensor, size: int, shape) -> Tensor:
    shape = tuple(shape)
    b = 1 if len(shape) == 3 else shape[0]
    c, h, w = shape[-3:]
    x = seqs.reshape(b, h // size, w // size, size, size, c)
    x = x.permute(0, 5, 3, 1, 4, 2)
    return x.reshape(shape)


@lru_cache(maxsize=None)
def relative_position_index(size: int) -> np.ndarray:
    """``(size^2, size^2)`` map from (query, key) token pair to a bias-table row.

    Row = ``(dy + size - 1) * (2*size - 1) + (dx + size - 1)`` for the offset
    ``(dy, dx) = query - key``.
    """
    ys, xs = np.divmod(np.arange(size * size), size)
    dy = ys[:, None] - ys[None, :] + size - 1
    dx = xs[:, None] - xs[None, :] + size - 1
    index = dy * (2 * size - 1) + dx
    index.setflags(write=False)
    return index


class RelativeAttention(Module):
    """Pre-norm multi-head self-attention with a learned relative-position bias.

    Operates on ``(S, L, C)`` token sequences where ``L == size**2``; adds its
    input back (residual).
    """

    def __init__(self, rng, dim: int, head_dim: int, size: int, dtype=np.float32):
        if dim % head_dim:
            raise ShapeError(f"attention width {dim} not divisible by head width {head_dim}", (dim,))
        self.size = size
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.norm = LayerNorm(dim, dtype=dtype)
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.rel_bias = Tensor(np.zeros(((2 * size - 1) ** 2, self.heads)), requires_grad=True, dtype=dtype)
        self._last_attention: np.ndarray | None = None

    def bias(self) -> Tensor:
        """``(heads, L, L)`` bias gathered from the table."""
        return self.rel_bias[relative_position_index(self.size)].permute(2, 0, 1)

    def forward(self, seq: Tensor) -> Tensor:
        s, length, c = seq.shape
        if length != self.size * self.size:
            raise ShapeError(f"sequence length must be {self.size}^2", seq.shape)
        if c != self.heads * self.head_dim:
            raise ShapeError("token width does not match the attention width", seq.shape, (self.heads * self.head_dim,))
        with ops.mac_scope("attention"):
            qkv = self.qkv(self.norm(seq)).reshape(s, length, 3, self.heads, self.head_dim)
            q = qkv[:, :, 0].permute(0, 2, 1, 3) * (self.head_dim ** -0.5)
            k = qkv[:, :, 1].permute(0, 2, 3, 1)
            v = qkv[:, :, 2].permute(0, 2, 1, 3)
            with ops.mac_scope("attention_core"):
                logits = ops.matmul(q, k)
            logits = logits + broadcast_to(self.bias(), logits.shape)
            attn = ops.softmax(logits, axis=-1)
            self._last_attention = attn.data
            with ops.mac_scope("attention_core"):
                out = ops.matmul(attn, v)
            out = out.permute(0, 2, 1, 3).reshape(s, length, c)
            return seq + self.proj(out)


class FeedForward(Module):
    """Pre-norm MLP ``x + fc2(gelu(fc1(norm(x))))``."""

    def __init__(self, rng, dim: int, expansion: int = 4, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(rng, dim, expansion * dim, dtype=dtype)
        self.fc2 = Linear(rng, expansion * dim, dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        with ops.mac_scope("ffn"):
            return x + self.fc2(gelu(self.fc1(self.norm(x))))


class MaxViTBlock(Module):
    """MBConv followed by window (local) then grid (global, dilated) attention, each with an FFN."""

    def __init__(self, rng, cin: int, cout: int, stride: int = 1, *, expansion: int = 4,
                 se_channels: int | None = None, head_dim: int = 32, window_size: int = 8,
                 grid_size: int = 8, ffn_expansion: int = 4, dtype=np.float32):
        self.window_size, self.grid_size = window_size, grid_size
        self.mbconv = MBConv(rng, cin, cout, stride, expansion, se_channels, dtype=dtype)
        self.window_attn = RelativeAttention(rng, cout, head_dim, window_size, dtype=dtype)
        self.window_ffn = FeedForward(rng, cout, ffn_expansion, dtype=dtype)
        self.grid_attn = RelativeAttention(rng, cout, head_dim, grid_size, dtype=dtype)
        self.grid_ffn = FeedForward(rng, cout, ffn_expansion, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        with ops.mac_scope("mbconv"):
            x = self.mbconv(z)
        shape = x.shape
        p, g = self.window_size, self.grid_size
        if shape[-1] % p or shape[-2] % p or shape[-1] % g or shape[-2] % g:
            raise ShapeError(f"MaxViT block needs spatial extents divisible by window {p} and grid {g}", shape)
        x = window_reverse(self.window_ffn(self.window_attn(window_partition(x, p))), p, shape)
        x = grid_reverse(self.grid_ffn(self.grid_attn(grid_partition(x, g))), g, shape)
        return x
