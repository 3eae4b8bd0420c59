"""Command-line entry point: ``maxvit-unet <command> [options]``.

Exit codes: 0 success, 2 configuration/usage error, 3 shape-conformance
failure, 4 numeric failure (NaN/inf), 5 gradient-check failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, GradCheckError, NumericError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_SHAPE, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

REFERENCE_PARAMS = 24.72e6
REFERENCE_MACS = 7.51e9

# class 1..4 overlay colours; background keeps the image
PALETTE = np.array([[255, 0, 0], [255, 255, 0], [0, 255, 0], [0, 0, 255]], dtype=np.float32)


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    cfg = load_config(args.config, getattr(args, "preset", None), overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "dataset_dir", None):
        cfg.data.dataset_dir = args.dataset_dir
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path) -> None:
    dump_config(cfg, out / "config.resolved.yaml")


# ---------------------------------------------------------------- inspect --


def cmd_inspect(args) -> int:
    from .model import build, count_parameters, estimate_flops, expected_shapes, parameter_breakdown, shape_walk

    cfg = _resolve(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    t0 = time.perf_counter()
    model = build(cfg.model, cfg.train.seed)
    seen = shape_walk(model)
    expected = expected_shapes(cfg.model)
    ok = True
    print(f"{'stage':<6} {'output':<18} {'expected':<18} status")
    for name, want in expected.items():
        got = seen.get(name)
        good = got == want
        ok &= good
        print(f"{name:<6} {str(got):<18} {str(want):<18} {'PASS' if good else 'FAIL'}")
    total = count_parameters(model)
    print(f"\nparameters: {total:,} ({total / 1e6:.2f}M; reference 24.72M, {100 * (total / REFERENCE_PARAMS - 1):+.2f}%)")
    for name, n in parameter_breakdown(model).items():
        print(f"  {name:<6} {n:>12,}")
    flops = estimate_flops(cfg.model)
    dev = flops["total"] / REFERENCE_MACS - 1
    print(f"\nMACs per image: {flops['total'] / 1e9:.3f}G (reference 7.51G, {100 * dev:+.1f}%)"
          f"{'' if abs(dev) <= 0.15 else '  WARNING: outside +-15%'}")
    for name, n in flops["per_stage"].items():
        print(f"  {name:<6} {n / 1e9:>8.3f}G")
    print(f"  attention {flops['attention'] / 1e9:.3f}G (matmul core {flops['attention_core'] / 1e9:.3f}G)")
    report = {"shapes": {k: list(v) for k, v in seen.items()}, "expected": {k: list(v) for k, v in expected.items()},
              "shapes_pass": bool(ok), "parameters": total, "breakdown": parameter_breakdown(model), "macs": flops}
    (out / "inspect.json").write_text(json.dumps(report, indent=2))
    print(f"\n{'PASS' if ok else 'FAIL'} shape conformance ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_SHAPE


# ------------------------------------------------------------------ train --


def _patches(cfg: RunConfig, dataset_dir, seed: int):
    from .data import load_dataset, synth_generate

    if dataset_dir:
        size = cfg.data.patch_size or cfg.model.input_size[0]
        return load_dataset(dataset_dir, cfg.model.num_classes).patches(size)
    return synth_generate(cfg.data.synthetic_count, seed, cfg.model.num_classes, size=cfg.model.input_size[0])


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import AdamWState, train

    cfg = _resolve(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    patches = _patches(cfg, cfg.data.dataset_dir, cfg.train.seed)
    val = _patches(cfg, cfg.data.val_dir, cfg.train.seed) if cfg.data.val_dir else None
    model = state = None
    if args.checkpoint:
        model, _, optim = load_checkpoint(args.checkpoint)
        state = AdamWState.from_dict(optim)
    result = train(cfg, patches, val, out, model=model, state=state)
    if result.best is not None:
        print(f"best mDice (foreground) {result.best['mDice_fg']:.4f} at iteration {result.best['iteration']}")
    return EXIT_OK


# ------------------------------------------------------------------- eval --


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .objectives import format_report, report_items
    from .train import evaluate

    cfg = _resolve(args)
    out = _out_dir(args)
    model, header, _ = load_checkpoint(args.checkpoint)
    cfg.model = model.config
    _snapshot(cfg, out)
    summary = evaluate(model, _patches(cfg, cfg.data.dataset_dir, cfg.train.seed), cfg.data.normalization)
    text = format_report(summary)
    print(text)
    (out / "metrics.txt").write_text(text + "\n")
    (out / "metrics.json").write_text(json.dumps(report_items(summary), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- predict --


def overlay(rgb: np.ndarray, pred: np.ndarray, truth: np.ndarray | None, num_classes: int) -> np.ndarray:
    """RGB ``(3, H, W)`` overlay: TP white / FP red / FN blue for binary masks with
    ground truth, otherwise per-class colours blended over the image."""
    img = np.moveaxis(rgb, 0, -1).astype(np.float32).copy()
    if num_classes == 2 and truth is not None:
        valid = truth != 255
        img[valid & (pred == 1) & (truth == 1)] = (255, 255, 255)
        img[valid & (pred == 1) & (truth == 0)] = (255, 0, 0)
        img[valid & (pred == 0) & (truth == 1)] = (0, 0, 255)
    else:
        for k in range(1, num_classes):
            sel = pred == k
            img[sel] = 0.5 * img[sel] + 0.5 * PALETTE[(k - 1) % len(PALETTE)]
    return np.moveaxis(img, -1, 0)


def predict_image(model, rgb: np.ndarray, norm, size: int) -> np.ndarray:
    """Tile ``rgb`` into ``size`` patches, predict each, and stitch the class mask."""
    from .data import extract_patches, normalize
    from .objectives import predict_mask
    from .tensor import Tensor, no_grad

    _, h, w = rgb.shape
    if h < size or w < size:
        raise ShapeError(f"image smaller than the model input size {size}", rgb.shape)
    mask = np.zeros((h, w), dtype=np.uint8)
    model.eval()
    with no_grad():
        for p in extract_patches(rgb, np.zeros((h, w), np.uint8), size):
            r, c = p.origin
            logits = model(Tensor(normalize(p.rgb, norm), dtype=model.stem.conv1.weight.dtype))
            mask[r:r + size, c:c + size] = predict_mask(logits)
    return mask


def cmd_predict(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import decode_mask, encode_mask, load_image, save_image

    cfg = _resolve(args)
    out = _out_dir(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg.model = model.config
    _snapshot(cfg, out)
    src = Path(args.input)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise ConfigError(f"no input images at {src}")
    (out / "masks").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    for f in files:
        rgb = load_image(f)
        pred = predict_image(model, rgb, cfg.data.normalization, cfg.model.input_size[0])
        truth = None
        if args.ground_truth:
            with Image.open(Path(args.ground_truth) / f"{f.stem}.png") as m:
                truth = decode_mask(m, model.config.num_classes)
        encode_mask(pred).save(out / "masks" / f"{f.stem}.png")
        save_image(out / "overlays" / f"{f.stem}.png", overlay(rgb, pred, truth, model.config.num_classes))
        print(f"{f.name}: {np.bincount(pred.ravel(), minlength=model.config.num_classes).tolist()}")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck --


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    failed = []
    for name, report in gradsuite.run(args.scope, seed=args.seed or 0, only=args.only):
        print(f"{args.scope}:{name:<26} {report}")
        if not report.passed:
            failed.append(name)
    if failed:
        raise GradCheckError(f"{len(failed)} case(s) failed: {', '.join(failed)}")
    return EXIT_OK


# -------------------------------------------------------- bench-attention --


def cmd_bench_attention(args) -> int:
    from . import bench

    cfg = _resolve(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    sizes = [int(s) for s in args.sizes.split(",")]
    costs = [bench.measure(s, args.channels, cfg.model.window_size, cfg.model.grid_size, cfg.model.head_dim,
                           seed=cfg.train.seed, repeats=args.repeats, dense_limit=args.dense_limit) for s in sizes]
    print(bench.format_table(costs))
    bench.write_csv(out / "attention_cost.csv", costs)
    (out / "attention_ratios.json").write_text(json.dumps(bench.ratios(costs), indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ synth --


def cmd_synth(args) -> int:
    from .data import synth_generate, write_dataset

    cfg = _resolve(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    patches = synth_generate(args.count, cfg.train.seed, args.num_classes or cfg.model.num_classes, size=args.size)
    write_dataset(out, patches)
    print(f"wrote {len(patches)} patches to {out}")
    return EXIT_OK


COMMANDS = {"inspect": cmd_inspect, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench-attention": cmd_bench_attention, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", choices=["monuseg18", "monusac20", "tiny"], help="model preset (before --config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--seed", type=int, help="single seed for initialization, sampling and augmentation")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--backend", choices=["numba", "numpy"], help="kernel backend for this run")

    parser = argparse.ArgumentParser(prog="maxvit-unet", description="MaxViT-UNet segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("inspect", parents=[common], help="shape table, parameter and MAC report")
    p = sub.add_parser("train", parents=[common], help="train on a dataset folder or synthetic patches")
    p.add_argument("--dataset-dir")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = sub.add_parser("eval", parents=[common], help="Dice/IoU report of a checkpoint")
    p.add_argument("--dataset-dir")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("predict", parents=[common], help="class masks and overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--ground-truth", help="directory of masks named like the inputs")
    p.add_argument("--dataset-dir", help=argparse.SUPPRESS)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--scope", choices=["op", "block", "model"], default="op")
    p.add_argument("--only", help="run a single named case")
    p = sub.add_parser("bench-attention", parents=[common], help="windowed vs dense attention cost")
    p.add_argument("--sizes", default="8,16,32,64")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dense-limit", type=int, default=4096, help="largest token count for timed dense attention")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset folder")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--num-classes", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.backend:
        kernels.set_backend(args.backend)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GradCheckError as exc:
        print(f"gradcheck failed: {exc}", file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
