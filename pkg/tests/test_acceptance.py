"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (``WARN`` for the informational
MAC count). Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``.
"""
import dataclasses
import math
import sys
import time
import warnings

import numpy as np
import pytest

from maxvit_unet import Tensor, bench, gradsuite, kernels
from maxvit_unet.blocks import grid_partition, grid_reverse, window_partition, window_reverse
from maxvit_unet.checkpoint import load_checkpoint, save_checkpoint
from maxvit_unet.config import MONUSEG18, TINY, AugmentationSpec, OptimizerConfig, RunConfig
from maxvit_unet.data import ImagePatch, augment, make_batch, sample_rng, synth_generate
from maxvit_unet.model import build, count_parameters, estimate_flops, parameter_breakdown, shape_walk
from maxvit_unet.objectives import LossWeights, SegmentationCounts, composite_loss, cross_entropy, dice_loss
from maxvit_unet.tensor import no_grad
from maxvit_unet.train import evaluate, train

from oracles import ce_oracle, hard_counts_oracle, soft_dice_oracle

# reference values
SHAPES = {
    "stem": (64, 128, 128), "S1": (64, 64, 64), "S2": (128, 32, 32), "S3": (256, 16, 16), "S4": (512, 8, 8),
    "D3": (256, 16, 16), "D2": (128, 32, 32), "D1": (64, 64, 64), "head": (2, 256, 256),
}
PARAMS, PARAMS_TOL = 24.72e6, 0.05
MACS, MACS_TOL = 7.51e9, 0.15


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail, status=None):
        with capsys.disabled():
            print(f"\n[{status or ('PASS' if ok else 'FAIL')}] criterion {number} {name}: {detail}")
    return emit


def test_c1_shape_conformance(report):
    t0 = time.perf_counter()
    seen = shape_walk(build(MONUSEG18, seed=0), (256, 256))
    elapsed = time.perf_counter() - t0
    wrong = {k: seen.get(k) for k, v in SHAPES.items() if seen.get(k) != v}
    ok = not wrong and elapsed < 10
    report(1, "shape conformance", ok, f"{len(SHAPES) - len(wrong)}/{len(SHAPES)} match, {elapsed:.1f}s"
           + (f", mismatched {wrong}" if wrong else ""))
    assert not wrong
    assert elapsed < 10


def test_c2_parameter_count(report):
    t0 = time.perf_counter()
    model = build(MONUSEG18, seed=0)
    total = count_parameters(model)
    breakdown = parameter_breakdown(model)
    elapsed = time.perf_counter() - t0
    dev = total / PARAMS - 1
    ok = abs(dev) <= PARAMS_TOL and elapsed < 10
    parts = ", ".join(f"{k} {v / 1e6:.3f}M" for k, v in breakdown.items())
    report(2, "parameter count", ok, f"{total:,} ({100 * dev:+.2f}% vs 24.72M) in {elapsed:.1f}s [{parts}]")
    assert sum(breakdown.values()) == total
    assert abs(dev) <= PARAMS_TOL
    assert elapsed < 10


def test_c3_mac_count(report):
    flops = estimate_flops(MONUSEG18, (256, 256))
    dev = flops["total"] / MACS - 1
    ok = abs(dev) <= MACS_TOL
    report(3, "MAC count (informational)", ok, f"{flops['total'] / 1e9:.3f}G ({100 * dev:+.1f}% vs 7.51G)",
           status=None if ok else "WARN")
    if not ok:
        warnings.warn(f"analytic MACs {flops['total']:.3e} outside +-15% of 7.51G")


def test_c4_attention_scaling(report):
    t0 = time.perf_counter()
    costs = [bench.measure(s, channels=64, window=8, grid=8, repeats=1) for s in (8, 16, 32, 64)]
    elapsed = time.perf_counter() - t0
    ratios = bench.ratios(costs)
    win = [r["windowed"] for r in ratios]
    dense = [r["dense"] for r in ratios]
    measured_ok = all(c.measured_windowed_macs == c.windowed_macs for c in costs) and \
        all(c.measured_dense_macs in (None, c.dense_macs) for c in costs)
    ok = all(abs(r - 4.0) <= 0.05 for r in win) and all(abs(r - 16.0) <= 0.1 for r in dense) \
        and measured_ok and elapsed < 60
    report(4, "attention scaling", ok, f"windowed x{', x'.join(f'{r:.3f}' for r in win)}; "
           f"dense x{', x'.join(f'{r:.2f}' for r in dense)}; {elapsed:.1f}s")
    assert measured_ok
    assert all(abs(r - 4.0) <= 0.05 for r in win)
    assert all(abs(r - 16.0) <= 0.1 for r in dense)
    assert elapsed < 60


def test_c5_gradient_suite(report):
    t0 = time.perf_counter()
    failed, count, worst = [], 0, 0.0
    for scope in ("op", "block", "model"):
        for name, result in gradsuite.run(scope, seed=0):
            count += 1
            worst = max(worst, result.max_rel_err)
            if not result.passed:
                failed.append(f"{scope}:{name} ({result.max_rel_err:.2e})")
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 600
    report(5, "gradient check", ok, f"{count - len(failed)}/{count} cases, worst rel err {worst:.2e}, "
           f"backend {kernels.get_backend()}, {elapsed:.0f}s" + (f"; failed {failed}" if failed else ""))
    assert {"mbconv_stride1", "mbconv_stride2", "window_attention", "grid_attention", "feed_forward",
            "decoder_stage"} <= set(gradsuite.cases("block"))
    assert not failed
    assert elapsed < 600


def _roundtrips() -> list[str]:
    rng = np.random.default_rng(6)
    broken = []
    for shape, size in (((2, 8, 16, 16), 8), ((1, 4, 8, 24), 4), ((3, 2, 6, 6), 2), ((1, 1, 8, 8), 8)):
        x = Tensor(rng.normal(size=shape))
        if window_reverse(window_partition(x, size), size, shape).data.tobytes() != x.data.tobytes():
            broken.append(f"window {shape}/{size}")
        if grid_reverse(grid_partition(x, size), size, shape).data.tobytes() != x.data.tobytes():
            broken.append(f"grid {shape}/{size}")
    return broken


def test_c6_round_trips(report, tmp_path):
    broken = _roundtrips()

    model = build(TINY, seed=4)
    noise = np.random.default_rng(1)
    for p in model.parameters():
        p.data += noise.normal(scale=0.05, size=p.shape).astype(p.dtype)
    save_checkpoint(tmp_path / "a.npz", model, {"note": 1})
    loaded, _, _ = load_checkpoint(tmp_path / "a.npz")
    for (n, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
        if p.tobytes() != q.tobytes() or p.dtype != q.dtype:
            broken.append(f"checkpoint {n}")
    save_checkpoint(tmp_path / "b.npz", loaded, {"note": 1})
    if (tmp_path / "a.npz").read_bytes() != (tmp_path / "b.npz").read_bytes():
        broken.append("checkpoint re-save bytes")
    x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 64, 64)).astype(np.float32))
    model.eval(), loaded.eval()
    with no_grad():
        if model(x).data.tobytes() != loaded(x).data.tobytes():
            broken.append("checkpoint forward")

    patches = synth_generate(3, 8, size=64)
    spec = AugmentationSpec(pad_size=64)
    a = make_batch(patches, spec, RunConfig().data.normalization, 21, range(3))
    b = make_batch(patches, spec, RunConfig().data.normalization, 21, range(3))
    if any(u.tobytes() != v.tobytes() for u, v in zip(a, b)):
        broken.append("augmentation batch")
    one = augment(patches[0], spec, sample_rng(21, 5))
    two = augment(patches[0], spec, sample_rng(21, 5))
    if one.rgb.tobytes() != two.rgb.tobytes() or one.mask.tobytes() != two.mask.tobytes():
        broken.append("augmentation sample")

    report(6, "round-trip invariants", not broken, "partitions, checkpoint, augmentation bitwise"
           + (f"; broken {broken}" if broken else ""))
    assert not broken


def _close(a, b, tol=1e-10):
    return abs(a - b) <= tol


def test_c7_objective_oracles(report):
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, []
    for case in range(200):
        c = int(rng.integers(2, 6))
        logits = rng.normal(scale=rng.uniform(0.5, 4.0), size=(c, 8, 8))
        target = rng.integers(0, c, size=(8, 8))
        if case % 3 == 0:
            target[rng.random((8, 8)) < 0.2] = 255
        t = Tensor(logits)
        values = [
            (cross_entropy(t, target).item(), ce_oracle(logits, target)),
            (cross_entropy(t, target, "sum").item(), ce_oracle(logits, target, "sum")),
            (dice_loss(t, target).item(), soft_dice_oracle(logits, target)),
            (dice_loss(t, target, include_background=True).item(),
             soft_dice_oracle(logits, target, include_background=True)),
        ]
        pred = logits.argmax(axis=0)
        summary = SegmentationCounts(c).update(pred, target).summary()
        want_dice, want_iou = hard_counts_oracle(pred, target, c)
        for got, want in zip(summary["dice"] + summary["iou"], want_dice + want_iou):
            if want is None:
                if not math.isnan(got):
                    failures.append(f"case {case}: absent class scored {got}")
            else:
                values.append((got, want))
        for got, want in values:
            worst = max(worst, abs(got - want))
            if not _close(got, want):
                failures.append(f"case {case}: {got} vs {want}")
        total, ce, dl = composite_loss(t, target, return_parts=True)
        if total.item() != 1.0 * ce.item() + 3.0 * dl.item():
            failures.append(f"case {case}: composite {total.item()} != CE + 3 Dice")
    exact_weights = LossWeights() == LossWeights(ce=1.0, dice=3.0)
    ok = not failures and exact_weights
    report(7, "objective oracles", ok, f"200 cases, max abs diff {worst:.1e}, composite = 1*CE + 3*Dice exact"
           + (f"; {failures[:3]}" if failures else ""))
    assert exact_weights
    assert not failures


def test_c8_overfit(report):
    # four 64x64 synthetic patches, full batch, no augmentation
    cfg = RunConfig(model=dataclasses.replace(TINY, num_classes=2))
    cfg.optim = OptimizerConfig(lr0=0.01, total_iterations=300)
    cfg.data = dataclasses.replace(cfg.data, augment=False)
    cfg.train = dataclasses.replace(cfg.train, batch_size=4, eval_interval=0, log_interval=0, seed=0)
    patches = synth_generate(4, 0, num_classes=2, size=64)
    t0 = time.perf_counter()
    result = train(cfg, patches, log=None)
    summary = evaluate(result.model, patches, cfg.data.normalization)
    elapsed = time.perf_counter() - t0
    loss = result.history[-1]["loss"]
    dice = summary["mDice_fg"]
    ok = loss < 0.1 and dice > 0.95 and len(result.history) <= 300 and elapsed < 1800
    report(8, "overfit", ok, f"loss {loss:.4f} (< 0.1), train Dice {dice:.4f} (> 0.95) after "
           f"{len(result.history)} iterations, {elapsed:.0f}s")
    assert loss < 0.1
    assert dice > 0.95
    assert elapsed < 1800


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
