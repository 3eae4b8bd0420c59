"""MaxViT-UNet assembly, shape walk, parameter and multiply-accumulate accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import MaxViTBlock
from .config import ArchitectureConfig
from .errors import ShapeError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor, concat, gelu, mish, no_grad

STAGE_NAMES = ("stem", "S1", "S2", "S3", "S4", "D3", "D2", "D1", "head")

# Output shapes listed for a (3, 256, 256) input with the default configuration.
REFERENCE_SHAPES = {
    "stem": (64, 128, 128),
    "S1": (64, 64, 64),
    "S2": (128, 32, 32),
    "S3": (256, 16, 16),
    "S4": (512, 8, 8),
    "D3": (256, 16, 16),
    "D2": (128, 32, 32),
    "D1": (64, 64, 64),
    "head": (2, 256, 256),
}


def _block_kwargs(cfg: ArchitectureConfig, cin: int, dtype) -> dict:
    mid = cfg.mbconv_expansion * cin
    base = cin if cfg.se_relative_to == "input" else mid
    return dict(expansion=cfg.mbconv_expansion, se_channels=base // cfg.se_reduction, head_dim=cfg.head_dim,
                window_size=cfg.window_size, grid_size=cfg.grid_size, ffn_expansion=cfg.ffn_expansion,
                dtype=dtype)


class Stem(Module):
    """Conv3x3/s2 -> BN -> GELU -> Conv3x3/s1 -> BN -> GELU."""

    def __init__(self, rng, cin: int, cout: int, dtype=np.float32):
        self.conv1 = Conv2d(rng, cin, cout, 3, stride=2, padding=1, bias=False, dtype=dtype)
        self.norm1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(rng, cout, cout, 3, stride=1, padding=1, bias=False, dtype=dtype)
        self.norm2 = BatchNorm2d(cout, dtype=dtype)
        self.in_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"stem expects {self.in_channels} input channels", x.shape)
        x = gelu(self.norm1(self.conv1(x)))
        return gelu(self.norm2(self.conv2(x)))


class EncoderStage(Module):
    def __init__(self, rng, cin: int, cout: int, depth: int, cfg: ArchitectureConfig, dtype=np.float32):
        self.blocks = [MaxViTBlock(rng, cin, cout, 2, **_block_kwargs(cfg, cin, dtype))]
        self.blocks += [MaxViTBlock(rng, cout, cout, 1, **_block_kwargs(cfg, cout, dtype)) for _ in range(depth - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class UpConv(Module):
    """ConvTranspose(k=2, s=2) -> BN -> Mish."""

    def __init__(self, rng, cin: int, cout: int, dtype=np.float32):
        self.conv = ConvTranspose2d(rng, cin, cout, 2, 2, bias=False, dtype=dtype)
        self.norm = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return mish(self.norm(self.conv(x)))


class DecoderStage(Module):
    """Upsample ``2c -> c``, concatenate the skip (``c``), fuse with MaxViT blocks ``2c -> c -> c``."""

    def __init__(self, rng, channels: int, depth: int, cfg: ArchitectureConfig, dtype=np.float32):
        c = channels
        self.up = UpConv(rng, 2 * c, c, dtype=dtype)
        self.blocks = [MaxViTBlock(rng, 2 * c, c, 1, **_block_kwargs(cfg, 2 * c, dtype))]
        self.blocks += [MaxViTBlock(rng, c, c, 1, **_block_kwargs(cfg, c, dtype)) for _ in range(depth - 1)]

    def forward(self, prev: Tensor, skip: Tensor) -> Tensor:
        up = self.up(prev)
        if up.shape != skip.shape:
            raise ShapeError("decoder: upsampled features and skip differ", up.shape, skip.shape)
        x = concat([up, skip], axis=-3)
        for blk in self.blocks:
            x = blk(x)
        return x


class SegmentationHead(Module):
    """Two learned 2x upsamplings (``c -> c/2 -> c/4``) and a 1x1 classifier."""

    def __init__(self, rng, channels: int, num_classes: int, dtype=np.float32):
        self.up1 = UpConv(rng, channels, channels // 2, dtype=dtype)
        self.up2 = UpConv(rng, channels // 2, channels // 4, dtype=dtype)
        self.classifier = Conv2d(rng, channels // 4, num_classes, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.up2(self.up1(x)))


@dataclass
class EncoderOutput:
    skips: list[Tensor]  # f1 (H/4), f2 (H/8), f3 (H/16)
    bottleneck: Tensor   # H/32


class MaxViTUNet(Module):
    def __init__(self, cfg: ArchitectureConfig, rng, dtype=np.float32):
        self.config = cfg
        ch = cfg.stage_channels
        self.stem = Stem(rng, cfg.in_channels, cfg.stem_channels, dtype=dtype)
        cins = (cfg.stem_channels,) + tuple(ch[:-1])
        self.encoder = [EncoderStage(rng, cin, c, d, cfg, dtype=dtype)
                        for cin, c, d in zip(cins, ch, cfg.blocks_per_stage)]
        # decoder[0] is D3 (deepest), decoder[2] is D1
        self.decoder = [DecoderStage(rng, c, cfg.decoder_blocks, cfg, dtype=dtype) for c in ch[2::-1]]
        self.head = SegmentationHead(rng, ch[0], cfg.num_classes, dtype=dtype)

    def encode(self, x: Tensor, record=None) -> EncoderOutput:
        with ops.mac_scope("stem"):
            x = self.stem(x)
        if record:
            record("stem", x)
        feats = []
        for i, stage in enumerate(self.encoder):
            with ops.mac_scope(f"S{i + 1}"):
                x = stage(x)
            if record:
                record(f"S{i + 1}", x)
            feats.append(x)
        return EncoderOutput(skips=feats[:3], bottleneck=feats[3])

    def forward(self, x: Tensor, record=None) -> Tensor:
        """Class logits ``(C, H, W)`` (or ``(B, C, H, W)`` for batched input)."""
        if x.ndim not in (3, 4):
            raise ShapeError("model input must be (3, H, W) or (B, 3, H, W)", x.shape)
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError("input extents must be divisible by 32", x.shape)
        enc = self.encode(x, record)
        y = enc.bottleneck
        for i, (stage, skip) in enumerate(zip(self.decoder, reversed(enc.skips))):
            name = f"D{3 - i}"
            with ops.mac_scope(name):
                y = stage(y, skip)
            if record:
                record(name, y)
        with ops.mac_scope("head"):
            logits = self.head(y)
        if record:
            record("head", logits)
        return logits


def build(cfg: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> MaxViTUNet:
    """Validate ``cfg`` and initialize a model deterministically from ``seed``."""
    cfg.validate()
    return MaxViTUNet(cfg, np.random.default_rng(seed), dtype=dtype)


# ------------------------------------------------------------- accounting --


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_breakdown(model: MaxViTUNet) -> dict[str, int]:
    """Trainable parameter count per top-level stage (stem, S1-S4, D3-D1, head)."""
    parts = {"stem": model.stem}
    parts.update({f"S{i + 1}": s for i, s in enumerate(model.encoder)})
    parts.update({f"D{3 - i}": s for i, s in enumerate(model.decoder)})
    parts["head"] = model.head
    return {name: count_parameters(m) for name, m in parts.items()}


def expected_shapes(cfg: ArchitectureConfig, input_size=None) -> dict[str, tuple[int, int, int]]:
    h, w = input_size or cfg.input_size
    ch = cfg.stage_channels
    sizes = cfg.stage_sizes((h, w))
    shapes = {"stem": (cfg.stem_channels, h // 2, w // 2)}
    for i in range(4):
        shapes[f"S{i + 1}"] = (ch[i],) + sizes[i]
    for i in (3, 2, 1):
        shapes[f"D{i}"] = (ch[i - 1],) + sizes[i - 1]
    shapes["head"] = (cfg.num_classes, h, w)
    return shapes


def shape_walk(model: MaxViTUNet, input_size=None, seed: int = 0) -> dict[str, tuple[int, ...]]:
    """Run one unbatched inference pass and record every stage's output shape."""
    cfg = model.config
    h, w = input_size or cfg.input_size
    cfg.validate((h, w))
    x = Tensor(np.random.default_rng(seed).normal(size=(cfg.in_channels, h, w)),
               dtype=model.stem.conv1.weight.dtype)
    seen: dict[str, tuple[int, ...]] = {}
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model(x, record=lambda name, t: seen.__setitem__(name, tuple(t.shape)))
    finally:
        model.train(was_training)
    return seen


def _block_macs(cfg: ArchitectureConfig, cin: int, cout: int, stride: int, h_in: int, w_in: int) -> dict[str, int]:
    mid = cfg.mbconv_expansion * cin
    squeeze = (cin if cfg.se_relative_to == "input" else mid) // cfg.se_reduction
    h, w = h_in // stride, w_in // stride
    conv = mid * cin * h_in * w_in + mid * 9 * h * w + 2 * mid * squeeze + cout * mid * h * w
    if stride == 2 or cin != cout:
        conv += cin * cout * h * w
    tokens = h * w
    attn = core = 0
    for size in (cfg.window_size, cfg.grid_size):
        length = size * size
        core += 2 * tokens * length * cout
        attn += 4 * cout * cout * tokens + 2 * tokens * length * cout
    ffn = 2 * 2 * cfg.ffn_expansion * cout * cout * tokens
    return {"mbconv": conv, "attention": attn, "attention_core": core, "ffn": ffn}


def estimate_flops(cfg: ArchitectureConfig, input_size=None) -> dict:
    """Analytic multiply-accumulate count of one unbatched forward pass.

    Counts convolutions, transposed convolutions, linear layers and attention
    matmuls; normalization, activations and pooling are not counted. Returns
    ``{"total", "per_stage", "attention", "attention_core"}``.
    """
    h, w = input_size or cfg.input_size
    ch = cfg.stage_channels
    per_stage: dict[str, int] = {}
    attention = core = 0
    hs, ws = h // 2, w // 2
    per_stage["stem"] = cfg.stem_channels * cfg.in_channels * 9 * hs * ws + cfg.stem_channels ** 2 * 9 * hs * ws

    def blocks(specs, h_in, w_in):
        nonlocal attention, core
        total = 0
        for cin, cout, stride in specs:
            m = _block_macs(cfg, cin, cout, stride, h_in, w_in)
            total += m["mbconv"] + m["attention"] + m["ffn"]
            attention += m["attention"]
            core += m["attention_core"]
            h_in, w_in = h_in // stride, w_in // stride
        return total

    cin = cfg.stem_channels
    for i, (c, depth) in enumerate(zip(ch, cfg.blocks_per_stage)):
        specs = [(cin, c, 2)] + [(c, c, 1)] * (depth - 1)
        per_stage[f"S{i + 1}"] = blocks(specs, hs, ws)
        hs, ws, cin = hs // 2, ws // 2, c
    for i in (3, 2, 1):
        c = ch[i - 1]
        hi, wi = h // 2 ** (i + 1), w // 2 ** (i + 1)
        up = 2 * c * (hi // 2) * (wi // 2) * c * 4
        specs = [(2 * c, c, 1)] + [(c, c, 1)] * (cfg.decoder_blocks - 1)
        per_stage[f"D{i}"] = up + blocks(specs, hi, wi)
    c1 = ch[0]
    h4, w4 = h // 4, w // 4
    per_stage["head"] = (c1 * h4 * w4 * (c1 // 2) * 4 + (c1 // 2) * (2 * h4) * (2 * w4) * (c1 // 4) * 4
                         + (c1 // 4) * h * w * cfg.num_classes)
    return {"total": sum(per_stage.values()), "per_stage": per_stage, "attention": attention,
            "attention_core": core}
