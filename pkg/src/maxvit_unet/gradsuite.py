"""Finite-difference gradient suite shared by the CLI ``gradcheck`` command and the tests.

Every case builds float64 inputs and a scalar loss, then runs
:func:`~maxvit_unet.gradcheck.grad_check`. Losses are small random projections
of the output, which keeps ``|f|`` (and thus the finite-difference round-off)
small relative to the gradients being measured.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np

from . import ops
from .blocks import FeedForward, MaxViTBlock, MBConv, RelativeAttention, SqueezeExcite, grid_partition, grid_reverse, \
    window_partition, window_reverse
from .config import TINY, ArchitectureConfig
from .gradcheck import GradCheckReport, grad_check
from .nn import Module
from .objectives import composite_loss, cross_entropy, dice_loss
from .tensor import Tensor, broadcast_to, concat, exp, gelu, log, mish, mul, pad, power, relu, sigmoid, sqrt, \
    tanh, tsum

STEP = 1e-4
TOL = 1e-3
SCOPES = ("op", "block", "model")

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict]]


def _t(rng, *shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True, dtype=np.float64)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(mul(out, weights))


def _op(fn, *shapes, positive=False, away_from_zero=False):
    def case(rng):
        inputs = {}
        for i, shape in enumerate(shapes):
            t = _t(rng, *shape)
            if positive:
                t.data = np.abs(t.data) + 0.5
            if away_from_zero:
                t.data = np.sign(t.data) * (np.abs(t.data) + 0.1)
            inputs[f"x{i}"] = t
        out_shape = fn(*inputs.values()).shape
        w = rng.normal(size=out_shape)
        return (lambda: _project(fn(*inputs.values()), w)), inputs
    return case


def _distinct(rng, *shape) -> Tensor:
    """Values with pairwise gaps of 0.1 so max-pooling stays differentiable under the step."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.1).reshape(shape), requires_grad=True, dtype=np.float64)


def _bn_case(training):
    def case(rng):
        x, g, b = _t(rng, 3, 4, 5, 5), _t(rng, 4, offset=1.0), _t(rng, 4)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        w = rng.normal(size=x.shape)
        return (lambda: _project(ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training), w)), \
            {"x": x, "gamma": g, "beta": b}
    return case


def _maxpool(rng):
    x = _distinct(rng, 2, 3, 6, 6)
    w = rng.normal(size=(2, 3, 3, 3))
    return (lambda: _project(ops.pool2d(x, "max", 2), w)), {"x": x}


def _loss_case(kind):
    def case(rng):
        logits = _t(rng, 2, 3, 5, 5)
        target = rng.integers(0, 3, size=(2, 5, 5))
        target[0, 0, :2] = 255
        fn = {"cross_entropy": cross_entropy, "dice_loss": dice_loss, "composite_loss": composite_loss}[kind]
        return (lambda: fn(logits, target)), {"logits": logits}
    return case


def _partition_case(part, rev):
    def case(rng):
        x = _t(rng, 2, 3, 4, 4)
        w = rng.normal(size=part(x, 2).shape)
        return (lambda: _project(part(x, 2), w) + _project(rev(part(x, 2), 2, x.shape), np.ones(x.shape))), {"x": x}
    return case


OP_CASES: dict[str, Case] = {
    "add": _op(lambda a, b: a + b, (3, 4), (3, 4)),
    "sub": _op(lambda a, b: a - b, (3, 4), (3, 4)),
    "mul": _op(lambda a, b: a * b, (3, 4), (3, 4)),
    "div": _op(lambda a, b: a / b, (3, 4), (3, 4), positive=True),
    "scalar_mul": _op(lambda a, b: a * b, (3, 4), (1,)),
    "power": _op(lambda a: power(a, 1.7), (3, 4), positive=True),
    "exp": _op(exp, (3, 4)),
    "log": _op(log, (3, 4), positive=True),
    "sqrt": _op(sqrt, (3, 4), positive=True),
    "tanh": _op(tanh, (3, 4)),
    "sigmoid": _op(sigmoid, (3, 4)),
    "relu": _op(relu, (3, 4), away_from_zero=True),
    "gelu": _op(gelu, (3, 4)),
    "mish": _op(mish, (3, 4)),
    "broadcast_to": _op(lambda a: broadcast_to(a, (2, 3, 4)), (3, 1)),
    "reshape": _op(lambda a: a.reshape(4, 3), (3, 4)),
    "permute": _op(lambda a: a.permute(2, 0, 1), (2, 3, 4)),
    "getitem_slice": _op(lambda a: a[1:, ::2], (3, 4)),
    "getitem_gather": _op(lambda a: a[np.array([[0, 2], [2, 2]])], (3, 4)),
    "concat": _op(lambda a, b: concat([a, b], axis=1), (2, 3), (2, 2)),
    "pad": _op(lambda a: pad(a, ((0, 0), (1, 2))), (2, 3)),
    "sum": _op(lambda a: a.sum(axis=1, keepdims=True), (3, 4)),
    "mean": _op(lambda a: a.mean(axis=0), (3, 4)),
    "matmul": _op(ops.matmul, (2, 3, 4), (2, 4, 5)),
    "linear": _op(ops.linear, (2, 3, 4), (4, 5), (5,)),
    "conv2d_3x3": _op(lambda x, w, b: ops.conv2d(x, w, b, 1, 1), (2, 3, 5, 5), (4, 3, 3, 3), (4,)),
    "conv2d_stride2": _op(lambda x, w: ops.conv2d(x, w, None, 2, 1), (2, 3, 6, 6), (4, 3, 3, 3)),
    "conv2d_1x1": _op(lambda x, w, b: ops.conv2d(x, w, b), (2, 3, 4, 4), (5, 3, 1, 1), (5,)),
    "conv2d_grouped": _op(lambda x, w: ops.conv2d(x, w, None, 1, 1, groups=2), (2, 4, 4, 4), (6, 2, 3, 3)),
    "conv2d_depthwise": _op(lambda x, w: ops.conv2d(x, w, None, 2, 1, groups=4), (2, 4, 6, 6), (4, 1, 3, 3)),
    "conv_transpose2d_k2s2": _op(lambda x, w, b: ops.conv_transpose2d(x, w, b, 2), (2, 3, 3, 3), (3, 4, 2, 2), (4,)),
    "conv_transpose2d_k3s2p1": _op(lambda x, w: ops.conv_transpose2d(x, w, None, 2, 1), (2, 3, 3, 3), (3, 2, 3, 3)),
    "batchnorm2d_train": _bn_case(True),
    "batchnorm2d_eval": _bn_case(False),
    "layernorm": _op(lambda x, g, b: ops.layernorm(x, g, b), (3, 5, 6), (6,), (6,)),
    "softmax": _op(lambda x: ops.softmax(x, -1), (3, 5)),
    "log_softmax": _op(lambda x: ops.log_softmax(x, 1), (2, 4, 3)),
    "maxpool2d": _maxpool,
    "avgpool2d": _op(lambda x: ops.pool2d(x, "avg", 2), (2, 3, 6, 6)),
    "global_avg_pool": _op(ops.global_avg_pool, (2, 3, 4, 5)),
    "window_partition": _partition_case(window_partition, window_reverse),
    "grid_partition": _partition_case(grid_partition, grid_reverse),
    "cross_entropy": _loss_case("cross_entropy"),
    "dice_loss": _loss_case("dice_loss"),
    "composite_loss": _loss_case("composite_loss"),
}


def _module_case(make_module: Callable[[np.random.Generator], Module], make_input, scale=1e-3, max_coords=6):
    """Gradients w.r.t. the input and every parameter (perturbed off their initial values)."""
    def case(rng):
        module = make_module(rng).astype(np.float64)
        module.train()
        for p in module.parameters():
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        xs = make_input(rng)
        xs = xs if isinstance(xs, tuple) else (xs,)
        out = module(*xs)
        w = rng.normal(size=out.shape) * scale
        inputs = {f"input{i}": x for i, x in enumerate(xs)}
        inputs.update(dict(module.named_parameters()))
        return (lambda: _project(module(*xs), w)), inputs, max_coords
    return case


def _tiny_kwargs(**over):
    kw = dict(expansion=4, se_channels=2, head_dim=4, window_size=2, grid_size=2, ffn_expansion=2)
    kw.update(over)
    return kw


def _decoder_stage(rng):
    from .model import DecoderStage

    cfg = dataclasses.replace(TINY, head_dim=4)
    return DecoderStage(rng, 8, 2, cfg)


def _stem(rng):
    from .model import Stem

    return Stem(rng, 3, 4)


def _head(rng):
    from .model import SegmentationHead

    return SegmentationHead(rng, 8, 2)


def _seq(size, channels=8):
    return lambda rng: _t(rng, 3, size * size, channels)


BLOCK_CASES = {
    "squeeze_excite": _module_case(lambda r: SqueezeExcite(r, 8, 2), lambda r: _t(r, 2, 8, 4, 4)),
    "mbconv_stride1": _module_case(lambda r: MBConv(r, 8, 8, 1, 4, 2), lambda r: _t(r, 2, 8, 4, 4)),
    "mbconv_stride1_project": _module_case(lambda r: MBConv(r, 4, 8, 1, 4, 1), lambda r: _t(r, 2, 4, 4, 4)),
    "mbconv_stride2": _module_case(lambda r: MBConv(r, 4, 8, 2, 4, 1), lambda r: _t(r, 2, 4, 6, 6)),
    "window_attention": _module_case(
        lambda r: _Partitioned(RelativeAttention(r, 8, 4, 2), window_partition, window_reverse, 2),
        lambda r: _t(r, 2, 8, 4, 4)),
    "grid_attention": _module_case(
        lambda r: _Partitioned(RelativeAttention(r, 8, 4, 2), grid_partition, grid_reverse, 2),
        lambda r: _t(r, 2, 8, 4, 4)),
    "relative_attention": _module_case(lambda r: RelativeAttention(r, 8, 4, 3), _seq(3)),
    "feed_forward": _module_case(lambda r: FeedForward(r, 8, 2), _seq(2)),
    "maxvit_block": _module_case(lambda r: MaxViTBlock(r, 4, 8, 2, **_tiny_kwargs()), lambda r: _t(r, 2, 4, 8, 8),
                                 max_coords=3),
    "stem": _module_case(_stem, lambda r: _t(r, 2, 3, 8, 8)),
    "segmentation_head": _module_case(_head, lambda r: _t(r, 2, 8, 3, 3)),
    "decoder_stage": _module_case(_decoder_stage, lambda r: (_t(r, 2, 16, 2, 2), _t(r, 2, 8, 4, 4)), max_coords=3),
}


class _Partitioned(Module):
    """Attention applied through a partition/reverse pair, as inside a MaxViT block."""

    def __init__(self, attn, part, rev, size):
        self.attn = attn
        self._part, self._rev, self._size = part, rev, size

    def forward(self, x):
        return self._rev(self.attn(self._part(x, self._size)), self._size, x.shape)


def tiny_model_config() -> ArchitectureConfig:
    """C=2, 64x64, one block per stage."""
    return dataclasses.replace(TINY, num_classes=2, blocks_per_stage=(1, 1, 1, 1), decoder_blocks=1)


def _model_case(rng):
    from .model import build

    cfg = tiny_model_config()
    make = lambda r: build(cfg, seed=int(r.integers(1 << 31)), dtype=np.float64)
    return _module_case(make, lambda r: _t(r, 2, 3, 64, 64), max_coords=2)(rng)


MODEL_CASES = {"tiny_model": _model_case}


def cases(scope: str) -> dict[str, Case]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    return {"op": OP_CASES, "block": BLOCK_CASES, "model": MODEL_CASES}[scope]


def run_case(name: str, case: Case, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    built = case(rng)
    f, inputs = built[0], built[1]
    max_coords = built[2] if len(built) > 2 else None
    return grad_check(f, inputs, step=STEP, tol=TOL, max_coords=max_coords, seed=seed)


def run(scope: str, seed: int = 0, only: str | None = None) -> Iterator[tuple[str, GradCheckReport]]:
    for name, case in cases(scope).items():
        if only is None or only == name:
            yield name, run_case(name, case, seed)
