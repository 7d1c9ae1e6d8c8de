"""Brute-force reference implementations used as oracles by the test suite.

Everything here is written as plain loops over definitions, independent of the
library's vectorized paths, so the two sides can disagree.
"""

import numpy as np


def conv2d_ref(x, w, b=None, stride=1, padding=0):
    """Direct-summation cross-correlation, [N,Cin,H,W] x [Cout,Cin,k,k]."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, ci, i * stride + ki, j * stride + kj] * w[co, ci, ki, kj]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def bilinear_ref(x, out_h, out_w):
    """Per-pixel half-pixel-center bilinear interpolation of [N,C,H,W]."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, :, i, j] = (
                x[:, :, y0, x0] * (1 - fy) * (1 - fx)
                + x[:, :, y0, x1] * (1 - fy) * fx
                + x[:, :, y1, x0] * fy * (1 - fx)
                + x[:, :, y1, x1] * fy * fx
            )
    return out


def cross_entropy_ref(logits, labels, ignore_value=255):
    """Per-pixel loop: mean of -log softmax at the labeled class."""
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                lab = int(labels[ni, i, j])
                if lab == ignore_value:
                    continue
                z = logits[ni, :, i, j].astype(np.float64)
                z = z - z.max()
                total += -(z[lab] - np.log(np.exp(z).sum()))
                count += 1
    if count == 0:
        raise ValueError("all pixels ignored")
    return total / count


def miou_ref(pred, gt, num_classes, ignore_value=255):
    """Set-based IoU per class over raw pixel arrays; mean over defined ones."""
    ious = []
    valid = gt != ignore_value
    for c in range(num_classes):
        pred_c = (pred == c) & valid
        gt_c = gt == c
        gt_c = gt_c & valid
        inter = np.logical_and(pred_c, gt_c).sum()
        union = np.logical_or(pred_c, gt_c).sum()
        if union == 0:
            continue
        ious.append(inter / union)
    if not ious:
        raise ValueError("no class present")
    return float(np.mean(ious))


def pseudo_label_ref(probs, threshold, ignore_value=255):
    """Per-pixel loop over [C,H,W] softmax maps: argmax if confident else ignore."""
    c, h, w = probs.shape
    out = np.full((h, w), ignore_value, dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            best = 0
            for k in range(1, c):
                if probs[k, i, j] > probs[best, i, j]:
                    best = k
            if probs[best, i, j] >= threshold:
                out[i, j] = best
    return out
