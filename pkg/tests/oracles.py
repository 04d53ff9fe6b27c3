"""Independent reference implementations used to check the package.

Everything here is deliberately written the slow way (explicit Python
loops, numpy scalars) and never calls into semiseg's own loss/metric code.
"""

import math

import numpy as np
import torch


def logsumexp(values):
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def contrastive_oracle(grid, patch_vecs, tau):
    """Per anchor: build the full logit vector, softmax-CE against class 0."""
    grid = np.asarray(grid, dtype=np.float64)
    vecs = np.asarray(patch_vecs, dtype=np.float64)
    n = grid.shape[0]
    cells = grid.reshape(n * n, -1)
    total = 0.0
    for i in range(n * n):
        logits = [float(cells[i] @ vecs[i]) / tau]
        for m in range(n * n):
            if m != i:
                logits.append(float(cells[i] @ cells[m]) / tau)
        total += logsumexp(logits) - logits[0]
    return total / (n * n)


def softmax2(a, b):
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb), eb / (ea + eb)


def consistency_oracle(global_logits, patch_logits_list, n):
    """Scalar pixel loop over patches, channels and pixels."""
    g = np.asarray(global_logits, dtype=np.float64)
    _, h, w = g.shape
    bh, bw = h // n, w // n
    total = 0.0
    count = 0
    for i, pl in enumerate(patch_logits_list):
        pl = np.asarray(pl, dtype=np.float64)
        r, c = divmod(i, n)
        for y in range(bh):
            for x in range(bw):
                gp = softmax2(g[0, r * bh + y, c * bw + x], g[1, r * bh + y, c * bw + x])
                pp = softmax2(pl[0, y, x], pl[1, y, x])
                for ch in range(2):
                    total += (pp[ch] - gp[ch]) ** 2
                    count += 1
    return total / count


def ce_oracle(logits, mask):
    """Explicit -sum_c y_c log p_c pixel loop."""
    lg = np.asarray(logits, dtype=np.float64)
    y = np.asarray(mask)
    _, h, w = lg.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            p0, p1 = softmax2(lg[0, r, c], lg[1, r, c])
            p_true = p1 if y[r, c] == 1 else p0
            total += -math.log(p_true)
    return total / (h * w)


def metrics_oracle(prob_fg, mask):
    """Exhaustive pixel counting, then the metric formulas."""
    p = np.asarray(prob_fg, dtype=np.float64)
    y = np.asarray(mask)
    h, w = p.shape
    total = h * w
    abs_sum = 0.0
    inter = n_pred = n_true = 0
    for r in range(h):
        for c in range(w):
            abs_sum += abs(p[r, c] - float(y[r, c]))
            pred = p[r, c] > 0.5
            true = y[r, c] > 0.5
            if pred:
                n_pred += 1
            if true:
                n_true += 1
            if pred and true:
                inter += 1
    mae = 100.0 * (abs_sum / total)
    dice = 100.0 if n_pred + n_true == 0 else 100.0 * 2.0 * inter / (n_pred + n_true)
    union_fg = n_pred + n_true - inter
    iou_fg = 1.0 if union_fg == 0 else inter / union_fg
    inter_bg = total - union_fg
    union_bg = total - inter
    iou_bg = 1.0 if union_bg == 0 else inter_bg / union_bg
    miou = 100.0 * 0.5 * (iou_fg + iou_bg)
    return mae, dice, miou


def finite_difference_grads(fn, tensors, step=1e-4):
    """Central differences of a scalar-valued fn w.r.t. each tensor entry."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                hi = float(fn())
                flat[k] = orig - step
                lo = float(fn())
                flat[k] = orig
                gflat[k] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """max over entries of |a - b| / max(1, |a|, |b|)."""
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=1.0)
        worst = max(worst, float(((a - b).abs() / denom).max()))
    return worst
