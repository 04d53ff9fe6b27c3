"""Differentiable training objectives.

All functions accept single-sample tensors (as documented) or the same
shapes with a leading batch dimension, and reduce to one scalar by
averaging over anchors/pixels and then over the batch. Softmax and
log-sum-exp paths are numerically stable for any finite logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    alpha: float   # contrastive weight
    beta: float    # consistency weight
    tau: float     # contrastive temperature

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be finite and non-negative, got {self.beta}")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")


def _stack_vectors(patch_vecs) -> torch.Tensor:
    if torch.is_tensor(patch_vecs):
        return patch_vecs
    return torch.stack(tuple(patch_vecs))


def contrastive_loss(grid: torch.Tensor, patch_vecs, tau: float,
                     num_negatives: int | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Patch-vs-image InfoNCE over the projected grid.

    ``grid`` is [n, n, D] (or [B, n, n, D]); ``patch_vecs`` holds the n*n
    patch embeddings in the same row-major order. For each anchor cell i the
    positive logit is grid_i . patch_i / tau and the negatives are
    grid_i . grid_m / tau for every other cell m of the same image; the
    per-anchor loss is -log softmax of the positive, averaged over all
    anchors (and the batch).

    ``num_negatives`` optionally subsamples that many negatives per anchor
    (without replacement) instead of using all n*n - 1.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    vecs = _stack_vectors(patch_vecs)
    if grid.dim() == 3:
        grid_b = grid.unsqueeze(0)
        vecs_b = vecs.unsqueeze(0) if vecs.dim() == 2 else None
    elif grid.dim() == 4:
        grid_b = grid
        vecs_b = vecs if vecs.dim() == 3 else None
    else:
        raise ValueError(f"grid must be [n,n,D] or [B,n,n,D], got shape {tuple(grid.shape)}")
    b, n, n2_, d = grid_b.shape
    if n != n2_:
        raise ValueError(f"grid must be square, got {n}x{n2_}")
    n2 = n * n
    if vecs_b is None or vecs_b.shape != (b, n2, d):
        raise ValueError(
            f"expected {n2} patch vectors of dim {d} per image to match grid shape "
            f"{tuple(grid.shape)}, got {tuple(vecs.shape)}"
        )

    g = grid_b.reshape(b, n2, d)
    pos = (g * vecs_b).sum(-1) / tau                       # [B, n2]
    sims = torch.matmul(g, g.transpose(-1, -2)) / tau      # [B, n2, n2]
    neg_inf = torch.finfo(sims.dtype).min
    eye = torch.eye(n2, dtype=torch.bool, device=sims.device)
    sims = sims.masked_fill(eye, neg_inf)
    if num_negatives is not None:
        if num_negatives <= 0:
            raise ValueError(f"num_negatives must be positive, got {num_negatives}")
        k = min(num_negatives, n2 - 1)
        scores = torch.rand(b, n2, n2, generator=generator)
        scores = scores.masked_fill(eye, -1.0)
        keep = torch.zeros(b, n2, n2, dtype=torch.bool, device=sims.device)
        keep.scatter_(-1, scores.topk(k, dim=-1).indices.to(sims.device), True)
        sims = sims.masked_fill(~keep, neg_inf)
    logits = torch.cat([pos.unsqueeze(-1), sims], dim=-1)  # [B, n2, 1 + n2]
    per_anchor = torch.logsumexp(logits, dim=-1) - pos
    return per_anchor.mean()


def consistency_loss(global_pred: torch.Tensor, patch_preds, n: int) -> torch.Tensor:
    """Mean squared difference between patch probabilities and aligned crops.

    Both branches are softmaxed over the class channel; the result averages
    over patches, channels and pixels (and the batch). Zero iff the two
    probability fields agree everywhere.
    """
    preds = _stack_vectors(patch_preds)
    if global_pred.dim() == 3:
        gp = global_pred.unsqueeze(0)
        if preds.dim() != 4:
            raise ValueError(
                f"patch predictions shape {tuple(preds.shape)} does not match "
                f"global shape {tuple(global_pred.shape)}"
            )
        pp = preds.unsqueeze(0)
    elif global_pred.dim() == 4:
        gp = global_pred
        if preds.dim() != 5:
            raise ValueError(
                f"patch predictions shape {tuple(preds.shape)} does not match "
                f"global shape {tuple(global_pred.shape)}"
            )
        pp = preds
    else:
        raise ValueError(f"global_pred must be [2,H,W] or [B,2,H,W], got {tuple(global_pred.shape)}")

    b, ch, h, w = gp.shape
    n2 = n * n
    if pp.shape[0] != b or pp.shape[1] != n2:
        raise ValueError(f"expected {n2} patch predictions per image, got {tuple(pp.shape)}")
    if h % n != 0 or w % n != 0:
        raise ValueError(f"global spatial dims ({h},{w}) are not divisible by n={n}")
    bh, bw = h // n, w // n
    if pp.shape[2] != ch or pp.shape[3] != bh or pp.shape[4] != bw:
        raise ValueError(
            f"patch predictions must be [{n2},{ch},{bh},{bw}] per image, got {tuple(pp.shape[1:])}"
        )

    gprob = F.softmax(gp, dim=1)
    crops = gprob.reshape(b, ch, n, bh, n, bw).permute(0, 2, 4, 1, 3, 5)
    crops = crops.reshape(b, n2, ch, bh, bw)
    pprob = F.softmax(pp, dim=2)
    return ((pprob - crops) ** 2).mean()


def _per_sample(pred: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
        mask = mask.unsqueeze(0)
    elif pred.dim() != 4:
        raise ValueError(f"pred must be [2,H,W] or [B,2,H,W], got shape {tuple(pred.shape)}")
    if mask.shape != (pred.shape[0], pred.shape[2], pred.shape[3]):
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match prediction shape {tuple(pred.shape)}"
        )
    return pred, mask


def dice_loss(pred: torch.Tensor, mask: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice on the foreground probability: 1 - (2*sum(p*y)+eps)/(sum p + sum y + eps)."""
    pred, mask = _per_sample(pred, mask)
    p_fg = F.softmax(pred, dim=1)[:, 1]
    y = mask.to(p_fg.dtype)
    inter = (p_fg * y).sum(dim=(-2, -1))
    denom = p_fg.sum(dim=(-2, -1)) + y.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def ce_loss(pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel 2-class cross-entropy; mask must be strictly binary."""
    pred, mask = _per_sample(pred, mask)
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise ValueError("mask values must be in {0, 1}")
    return F.cross_entropy(pred, mask.long())


def supervised_loss(pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Half Dice plus half cross-entropy."""
    return 0.5 * (dice_loss(pred, mask) + ce_loss(pred, mask))


def _as_float(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def total_loss(sup, contrast, consist, weights: LossWeights):
    """sup + alpha * contrast + beta * consist, rejecting non-finite terms."""
    for name, value in (("supervised", sup), ("contrastive", contrast),
                        ("consistency", consist)):
        if not math.isfinite(_as_float(value)):
            raise ValueError(f"non-finite {name} loss term: {_as_float(value)}")
    return sup + weights.alpha * contrast + weights.beta * consist
