"""Condition branch producing per-decoder-block features, and scale-weighted fusion."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Encoder, UNet
from .config import ModelConfig


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def fuse(h: torch.Tensor, h_cond: torch.Tensor, alpha) -> torch.Tensor:
    """h + alpha * h_cond with ``alpha`` a scalar or a [B|1, 1, H, W] map."""
    if h.shape != h_cond.shape:
        raise ValueError(f"feature shapes differ: {tuple(h.shape)} vs {tuple(h_cond.shape)}")
    if torch.is_tensor(alpha) and alpha.ndim > 0:
        if alpha.ndim != 4 or alpha.shape[1] != 1 or alpha.shape[-2:] != h.shape[-2:]:
            raise ValueError(f"scale map {tuple(alpha.shape)} does not broadcast over {tuple(h.shape)}")
    return h + alpha * h_cond


class ControlBranch(nn.Module):
    """Trainable encoder copy fed with z_t plus an embedded condition map.

    Every output passes through a zero-initialised 1x1 projection, so a fresh
    branch contributes exactly nothing.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.hint = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 16, 3, padding=1), nn.SiLU(),
            zero_module(nn.Conv2d(16, w[0], 3, padding=1)),
        )
        self.encoder = Encoder(cfg.channels, w, cfg.emb_dim)
        n = len(w)
        # output i feeds decoder block i: the middle block first, then skips from coarse to fine
        self.outputs = nn.ModuleList(
            zero_module(nn.Conv2d(w[n - 1 - i], w[n - 1 - i], 1)) for i in range(n)
        )

    @classmethod
    def from_backbone(cls, unet: UNet) -> "ControlBranch":
        branch = cls(unet.cfg)
        branch.encoder.load_state_dict(unet.encoder.state_dict())
        return branch

    def forward(self, cond: torch.Tensor, zt: torch.Tensor, emb: torch.Tensor) -> list[torch.Tensor]:
        if cond.ndim == 3:
            cond = cond[:, None]
        if cond.shape[-2:] != zt.shape[-2:] or cond.shape[1] != 1:
            raise ValueError(f"condition {tuple(cond.shape)} does not match latent {tuple(zt.shape)}")
        middle, skips = self.encoder(zt, emb, hint=self.hint(cond.to(zt.dtype)))
        n = len(self.outputs)
        feats = [middle] + [skips[n - 1 - i] for i in range(1, n)]
        return [proj(f) for proj, f in zip(self.outputs, feats)]


def block_sizes(cfg: ModelConfig) -> list[int]:
    n = cfg.depth
    return [cfg.image_size >> (n - 1 - i) for i in range(n)]


def pyramid(alpha_image: torch.Tensor, cfg: ModelConfig) -> list[torch.Tensor]:
    """Area-downsample an image-resolution scale map [B, 1, H, W] to every decoder block."""
    maps = []
    for size in block_sizes(cfg):
        factor = cfg.image_size // size
        maps.append(alpha_image if factor == 1 else F.avg_pool2d(alpha_image, factor))
    return maps


def constant_maps(value: float, cfg: ModelConfig, batch: int = 1, dtype=torch.float32) -> list[torch.Tensor]:
    return [torch.full((batch, 1, s, s), float(value), dtype=dtype) for s in block_sizes(cfg)]


def upsample_map(alpha: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(alpha, size=(size, size), mode="nearest")


def downsample_mask(mask: torch.Tensor, size: int, dtype=torch.float32) -> torch.Tensor:
    """Nearest-neighbour resize of [B, 1, H, W] masks, binarised at 0.5."""
    resized = F.interpolate(mask.to(torch.float32), size=(size, size), mode="nearest")
    return (resized >= 0.5).to(dtype)
