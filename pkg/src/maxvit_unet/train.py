"""AdamW with decoupled weight decay, the cosine schedule, and the training/evaluation loops."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .config import OptimizerConfig, RunConfig
from .data import ImagePatch, make_batch
from .errors import NumericError
from .model import MaxViTUNet, build
from .objectives import LossWeights, SegmentationCounts, composite_loss, predict_mask
from .tensor import Tensor, backward, no_grad


def decays(name: str, param: Tensor) -> bool:
    """Weight decay applies to conv/linear weights only (not norms, biases or bias tables)."""
    return param.ndim > 1 and not name.endswith("rel_bias")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict | None) -> "AdamWState":
        return cls() if d is None else cls(d["step"], dict(d["m"]), dict(d["v"]))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values()
                          if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def adamw_step(params: dict[str, Tensor], state: AdamWState, cfg: OptimizerConfig, lr: float) -> None:
    """One in-place AdamW update of every parameter from its ``.grad``.

    Raises :class:`NumericError` naming the parameter when a gradient is missing
    or not finite.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise NumericError(f"parameter {name} has no gradient")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        if cfg.weight_decay and decays(name, p):
            p.data *= 1.0 - lr * cfg.weight_decay
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


def cosine_lr(iteration: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to ``lr0``, then ``lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2``."""
    warm = cfg.warmup_iterations
    if iteration < warm:
        return cfg.lr0 * (iteration + 1) / warm
    span = max(cfg.total_iterations - warm, 1)
    t = min(iteration - warm, span)
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * t / span))


@dataclass
class TrainResult:
    model: MaxViTUNet
    history: list[dict]
    best: dict | None
    state: AdamWState


def evaluate(model: MaxViTUNet, patches: list[ImagePatch], norm, batch_size: int = 8) -> dict:
    """Argmax predictions in eval mode, accumulated into per-class and mean Dice/IoU."""
    counts = SegmentationCounts(model.config.num_classes)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(patches), batch_size):
                chunk = patches[start:start + batch_size]
                x, y = make_batch(chunk, None, norm, 0, range(len(chunk)))
                counts.update(predict_mask(model(Tensor(x, dtype=model.stem.conv1.weight.dtype))), y)
    finally:
        model.train(was_training)
    return counts.summary()


def _batch_indices(n: int, batch: int, iteration: int, seed: int) -> np.ndarray:
    """Deterministic epoch-shuffled sampling: iteration ``i`` takes the next ``batch`` entries."""
    per_epoch = max(n // batch, 1) if n >= batch else 1
    epoch, pos = divmod(iteration, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    if n < batch:
        return order
    return order[pos * batch:(pos + 1) * batch]


def train(cfg: RunConfig, patches: list[ImagePatch], val_patches: list[ImagePatch] | None = None,
          out_dir=None, model: MaxViTUNet | None = None, state: AdamWState | None = None,
          log: Callable[[str], None] | None = print) -> TrainResult:
    """Iteration-based training; logs ``iter, lr, loss[, mDice, mIoU]`` lines.

    With ``out_dir`` the log is appended to ``metrics.log`` and ``last.npz`` /
    ``best.npz`` (by foreground mDice on ``val_patches``, or the training
    patches when none are given) are written at each evaluation.
    """
    if not patches:
        raise ValueError("no training patches")
    seed = cfg.train.seed
    model = model if model is not None else build(cfg.model, seed)
    model.train()
    state = state if state is not None else AdamWState()
    params = dict(model.named_parameters())
    weights = LossWeights(cfg.train.ce_weight, cfg.train.dice_weight)
    aug = cfg.data.augmentation if cfg.data.augment else None
    norm = cfg.data.normalization
    dtype = model.stem.conv1.weight.dtype
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.log", "a")
    history: list[dict] = []
    best = None
    total = cfg.optim.total_iterations
    batch = cfg.train.batch_size

    def emit(line: str) -> None:
        if log is not None:
            log(line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        start = state.step
        for it in range(start, total):
            idx = _batch_indices(len(patches), batch, it, seed)
            x, y = make_batch([patches[i] for i in idx], aug, norm, seed, it * batch + np.arange(len(idx)))
            lr = cosine_lr(it, cfg.optim)
            model.zero_grad()
            loss = composite_loss(model(Tensor(x, dtype=dtype)), y, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at iteration {it}")
            backward(loss)
            if cfg.optim.grad_clip:
                clip_grad_norm(params, cfg.optim.grad_clip)
            adamw_step(params, state, cfg.optim, lr)
            record = {"iter": it, "lr": lr, "loss": value, "time": time.time()}
            last = it == total - 1
            if cfg.train.eval_interval and ((it + 1) % cfg.train.eval_interval == 0 or last):
                summary = evaluate(model, val_patches or patches, norm)
                record.update(mDice=summary["mDice_fg"], mIoU=summary["mIoU_fg"])
                if out is not None:
                    save_checkpoint(out / "last.npz", model, {"iteration": it + 1, "summary": summary},
                                    state.as_dict())
                if best is None or summary["mDice_fg"] > best["mDice_fg"]:
                    best = dict(summary, iteration=it + 1)
                    if out is not None:
                        save_checkpoint(out / "best.npz", model, {"iteration": it + 1, "summary": summary})
            history.append(record)
            if "mDice" in record:
                emit(f"{it}, {lr:.6g}, {value:.6f}, {record['mDice']:.4f}, {record['mIoU']:.4f}")
            elif cfg.train.log_interval and (it % cfg.train.log_interval == 0 or last):
                emit(f"{it}, {lr:.6g}, {value:.6f}")
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, history, best, state)
