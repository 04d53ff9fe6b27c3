"""Backbone, projection head and prediction head.

The backbone is a resolution-preserving U-Net producing a dense feature map
with ``feature_channels`` channels. One shared projection head embeds either
the whole-image feature map (block-pooled to an n-by-n grid) or a single
patch feature map (pooled globally) into the same unit sphere, so grid cell i
and the embedding of patch i are directly comparable. The prediction head is
a single 1x1 convolution to 2-class logits, applied to both levels with the
same weights.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

CHECKPOINT_SCHEMA_VERSION = 1


def _norm(channels: int) -> nn.GroupNorm:
    # Group norm keeps patch and full-image passes on identical statistics
    # regardless of batch composition, and is deterministic in eval mode.
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            _norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNetBackbone(nn.Module):
    """Encoder-decoder with skip connections; output keeps the input resolution."""

    def __init__(self, in_channels: int = 3, base_channels: int = 32, depth: int = 4,
                 out_channels: int = 16):
        super().__init__()
        self.depth = depth
        self.stem = ConvBlock(in_channels, base_channels)
        self.pool = nn.MaxPool2d(2)
        self.down = nn.ModuleList(
            ConvBlock(base_channels * 2 ** i, base_channels * 2 ** (i + 1)) for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(base_channels * 2 ** (i + 1), base_channels * 2 ** i, 2, stride=2)
            for i in reversed(range(depth))
        )
        self.dec = nn.ModuleList(
            ConvBlock(base_channels * 2 ** (i + 1), base_channels * 2 ** i)
            for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(base_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        divisor = 2 ** self.depth
        if x.shape[-2] % divisor != 0:
            raise ValueError(f"input height {x.shape[-2]} is not divisible by 2^depth={divisor}")
        if x.shape[-1] % divisor != 0:
            raise ValueError(f"input width {x.shape[-1]} is not divisible by 2^depth={divisor}")
        skips = []
        h = self.stem(x)
        for block in self.down:
            skips.append(h)
            h = block(self.pool(h))
        for upsample, block in zip(self.up, self.dec):
            h = upsample(h)
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.head(h)


class ProjectionHead(nn.Module):
    """Three 1x1 convolutions (ReLU between 1-2 and 2-3) over pooled features.

    Operating purely per-position on an already pooled grid keeps the
    receptive fields of distinct grid cells disjoint.
    """

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, embed_dim, 1)
        self.conv2 = nn.Conv2d(embed_dim, embed_dim, 1)
        self.conv3 = nn.Conv2d(embed_dim, embed_dim, 1)

    def forward(self, pooled: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        h = F.relu(self.conv1(pooled))
        h = F.relu(self.conv2(h))
        h = self.conv3(h)
        if normalize:
            h = F.normalize(h, dim=1)
        return h


class CrossLevelNet(nn.Module):
    """Shared backbone + projection/prediction heads for both feature levels.

    Spatial ops accept a single sample ([3,H,W] etc.) or a batch with a
    leading batch dimension, and return the matching rank.
    """

    def __init__(self, cfg: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        if backbone is None:
            backbone = UNetBackbone(3, cfg.base_channels, cfg.depth, cfg.feature_channels)
        self.backbone = backbone
        self.projection = ProjectionHead(cfg.feature_channels, cfg.embed_dim)
        self.prediction = nn.Conv2d(cfg.feature_channels, 2, 1)

    @staticmethod
    def _as_batch(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if t.dim() == 3:
            return t.unsqueeze(0), True
        if t.dim() == 4:
            return t, False
        raise ValueError(f"expected a 3D or 4D tensor, got shape {tuple(t.shape)}")

    def backbone_forward(self, image: torch.Tensor) -> torch.Tensor:
        """[3,H,W] -> [C,H,W] dense features (or batched)."""
        x, single = self._as_batch(image)
        fm = self.backbone(x)
        return fm.squeeze(0) if single else fm

    def project_global(self, fm: torch.Tensor, n: int | None = None,
                       normalize: bool = True) -> torch.Tensor:
        """Block-pool ``fm`` to an n-by-n grid and embed each cell: -> [n,n,D].

        Cell (r, c) depends only on feature-map block (r, c).
        """
        if n is None:
            n = self.cfg.grid_side
        x, single = self._as_batch(fm)
        h, w = x.shape[-2], x.shape[-1]
        if h % n != 0:
            raise ValueError(f"feature height {h} is not divisible by grid side n={n}")
        if w % n != 0:
            raise ValueError(f"feature width {w} is not divisible by grid side n={n}")
        pooled = F.avg_pool2d(x, kernel_size=(h // n, w // n))
        grid = self.projection(pooled, normalize=normalize)   # [B, D, n, n]
        grid = grid.permute(0, 2, 3, 1)                       # [B, n, n, D]
        return grid.squeeze(0) if single else grid

    def project_patch(self, fm_patch: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        """Pool a patch feature map globally and embed it: -> [D].

        Uses the same projection weights as :meth:`project_global`; pooling
        the whole patch plays the role of one grid block.
        """
        x, single = self._as_batch(fm_patch)
        pooled = x.mean(dim=(-2, -1), keepdim=True)           # [B, C, 1, 1]
        vec = self.projection(pooled, normalize=normalize)    # [B, D, 1, 1]
        vec = vec.flatten(1)
        return vec.squeeze(0) if single else vec

    def predict_head(self, fm: torch.Tensor) -> torch.Tensor:
        """1x1 conv to 2-class logits; output pixel (y, x) depends only on fm pixel (y, x)."""
        x, single = self._as_batch(fm)
        logits = self.prediction(x)
        return logits.squeeze(0) if single else logits

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Segmentation logits for an image: predict_head(backbone(image))."""
        return self.predict_head(self.backbone_forward(image))


def save_checkpoint(path, model: CrossLevelNet, extra: dict[str, Any] | None = None) -> None:
    """Single-archive checkpoint: versioned schema, config metadata, named tensors."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, device: str = "cpu") -> tuple[CrossLevelNet, dict[str, Any]]:
    payload = torch.load(path, map_location=device, weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {version!r} in {path}")
    cfg = ModelConfig(**payload["model_config"])
    model = CrossLevelNet(cfg)
    model.load_state_dict(payload["model_state"])
    model.to(device)
    return model, payload
