"""Non-overlapping n-by-n patch grids over images, feature maps and predictions.

Row-major indexing is the single convention every module relies on:
patch ``i`` covers block ``(r, c)`` with ``r = i // n`` and ``c = i % n``.
All functions act on the last two (spatial) dimensions, so they apply
unchanged to images [3,H,W], predictions [2,H,W], feature maps [C,H,W]
and batched variants of each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch


def _block_shape(t: torch.Tensor, n: int) -> tuple[int, int]:
    if t.dim() < 2:
        raise ValueError(f"expected a tensor with spatial dims, got shape {tuple(t.shape)}")
    h, w = t.shape[-2], t.shape[-1]
    if h % n != 0:
        raise ValueError(f"height {h} is not divisible by n={n}")
    if w % n != 0:
        raise ValueError(f"width {w} is not divisible by n={n}")
    return h // n, w // n


@dataclass(frozen=True)
class PatchSet:
    """The n*n tiles of one image, row-major."""

    patches: tuple[torch.Tensor, ...]
    n: int
    origin_hw: tuple[int, int]

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.patches[i]


def crop_aligned(t: torch.Tensor, i: int, n: int) -> torch.Tensor:
    """Block of ``t`` spatially congruent to patch ``i`` of the source image."""
    if not 0 <= i < n * n:
        raise IndexError(f"patch index {i} out of range for n={n} ({n * n} patches)")
    bh, bw = _block_shape(t, n)
    r, c = divmod(i, n)
    return t[..., r * bh:(r + 1) * bh, c * bw:(c + 1) * bw]


def decompose_image(image: torch.Tensor, n: int) -> PatchSet:
    """Tile ``image`` into n*n equal patches (exact, lossless)."""
    _block_shape(image, n)
    patches = tuple(crop_aligned(image, i, n) for i in range(n * n))
    return PatchSet(patches=patches, n=n, origin_hw=(image.shape[-2], image.shape[-1]))


def reassemble(parts: Sequence[torch.Tensor] | PatchSet, n: int) -> torch.Tensor:
    """Inverse of :func:`decompose_image`: row-major tiling of n*n parts."""
    if isinstance(parts, PatchSet):
        parts = parts.patches
    parts = list(parts)
    if len(parts) != n * n:
        raise ValueError(f"expected {n * n} parts for n={n}, got {len(parts)}")
    shape = parts[0].shape
    for k, p in enumerate(parts):
        if p.shape != shape:
            raise ValueError(f"part {k} has shape {tuple(p.shape)}, expected {tuple(shape)}")
    rows = [torch.cat(parts[r * n:(r + 1) * n], dim=-1) for r in range(n)]
    return torch.cat(rows, dim=-2)


def batch_blocks(t: torch.Tensor, n: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, n*n, C, H/n, W/n] with row-major block order.

    Equivalent to stacking ``crop_aligned(t[b], i, n)`` over ``i`` for each
    batch element, but as a single reshape.
    """
    if t.dim() != 4:
        raise ValueError(f"expected [B, C, H, W], got shape {tuple(t.shape)}")
    bh, bw = _block_shape(t, n)
    b, ch = t.shape[0], t.shape[1]
    blocks = t.reshape(b, ch, n, bh, n, bw)
    blocks = blocks.permute(0, 2, 4, 1, 3, 5)
    return blocks.reshape(b, n * n, ch, bh, bw)
