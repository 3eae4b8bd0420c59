"""Independent pixel-loop references for the objectives (pure Python math, no package code)."""
import math


def ce_oracle(logits, target, reduction="mean", ignore=255):
    c, h, w = logits.shape
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            t = int(target[y, x])
            if t == ignore:
                continue
            m = max(float(logits[k, y, x]) for k in range(c))
            lse = m + math.log(sum(math.exp(float(logits[k, y, x]) - m) for k in range(c)))
            total += lse - float(logits[t, y, x])
            count += 1
    return total if reduction == "sum" else total / count


def soft_dice_oracle(logits, target, smooth=1.0, include_background=False, ignore=255):
    c, h, w = logits.shape
    inter = [0.0] * c
    psum = [0.0] * c
    tsum = [0.0] * c
    for y in range(h):
        for x in range(w):
            t = int(target[y, x])
            if t == ignore:
                continue
            m = max(float(logits[k, y, x]) for k in range(c))
            e = [math.exp(float(logits[k, y, x]) - m) for k in range(c)]
            z = sum(e)
            for k in range(c):
                p = e[k] / z
                psum[k] += p
                if k == t:
                    inter[k] += p
                    tsum[k] += 1.0
    first = 0 if include_background else 1
    scores = [(2 * inter[k] + smooth) / (psum[k] + tsum[k] + smooth) for k in range(first, c)]
    return 1.0 - sum(scores) / len(scores)


def hard_counts_oracle(pred, target, c, ignore=255):
    inter, npred, ntrue = [0] * c, [0] * c, [0] * c
    for y in range(target.shape[0]):
        for x in range(target.shape[1]):
            t, p = int(target[y, x]), int(pred[y, x])
            if t == ignore:
                continue
            npred[p] += 1
            ntrue[t] += 1
            if p == t:
                inter[t] += 1
    dice = [2 * inter[k] / (npred[k] + ntrue[k]) if npred[k] + ntrue[k] else None for k in range(c)]
    iou = [inter[k] / (npred[k] + ntrue[k] - inter[k]) if npred[k] + ntrue[k] else None for k in range(c)]
    return dice, iou
