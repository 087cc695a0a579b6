"""Class-conditioned epsilon-prediction UNet and its noise schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if len(ab) != self.num_steps or len(self.betas) != self.num_steps:
            raise ValueError("schedule arrays must have num_steps entries")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bars must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "betas": self.betas.tolist(), "alpha_bars": self.alpha_bars.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["num_steps"]), np.asarray(d["betas"], dtype=np.float64),
                   np.asarray(d["alpha_bars"], dtype=np.float64))


def make_noise_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas and their cumulative products."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return NoiseSchedule(num_steps, betas, np.cumprod(1.0 - betas))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` is an int or a per-sample index tensor."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.num_steps):
        raise ValueError(f"timestep out of range [0, {schedule.num_steps})")
    ab = torch.as_tensor(schedule.alpha_bars[t_arr], dtype=z0.dtype, device=z0.device)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Stem, one residual block per resolution level, and a middle block."""

    def __init__(self, in_ch: int, widths: tuple[int, ...], emb_dim: int):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        prev = widths[0]
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for k, w in enumerate(widths):
            self.levels.append(ResBlock(prev, w, emb_dim))
            if k < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.middle = ResBlock(prev, prev, emb_dim)

    def forward(self, x, emb, hint=None):
        h = self.stem(x)
        if hint is not None:
            h = h + hint
        skips = []
        for k, block in enumerate(self.levels):
            h = block(h, emb)
            skips.append(h)
            if k < len(self.downs):
                h = self.downs[k](h)
        return self.middle(h, emb), skips


class DecoderBlock(nn.Module):
    """D^i: merge the skip connection, then upsample to the next level."""

    def __init__(self, width: int, out_width: int | None, emb_dim: int):
        super().__init__()
        self.res = ResBlock(2 * width, width, emb_dim)
        self.up = nn.Conv2d(width, out_width, 3, padding=1) if out_width is not None else None

    def forward(self, h, skip, emb):
        h = self.res(torch.cat([h, skip], dim=1), emb)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class UNet(nn.Module):
    """Backbone whose decoder is exposed block by block so features can be fused."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.time_mlp = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim))
        self.class_emb = nn.Embedding(cfg.num_classes + 1, cfg.emb_dim)   # last row: null class
        self.encoder = Encoder(cfg.channels, w, cfg.emb_dim)
        n = len(w)
        self.decoder = nn.ModuleList(
            DecoderBlock(w[n - 1 - i], w[n - 2 - i] if i < n - 1 else None, cfg.emb_dim) for i in range(n)
        )
        self.out_norm = nn.GroupNorm(_groups(w[0]), w[0])
        self.out_conv = nn.Conv2d(w[0], cfg.channels, 3, padding=1)
        # mean training image; sampling starts from the forward marginal at t = T around it
        self.register_buffer("prior_mean", torch.zeros(cfg.channels, cfg.image_size, cfg.image_size))

    @property
    def depth(self) -> int:
        return len(self.decoder)

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def embed(self, t: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        dtype = self.class_emb.weight.dtype
        return self.time_mlp(timestep_embedding(t, self.cfg.emb_dim, dtype)) + self.class_emb(class_ids)

    def block_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of the decoder input h^i for every block."""
        n, size = self.depth, self.cfg.image_size
        return [(self.cfg.widths[n - 1 - i], size >> (n - 1 - i), size >> (n - 1 - i)) for i in range(n)]

    def head(self, h):
        return self.out_conv(F.silu(self.out_norm(h)))

    def forward(self, zt, t, class_ids):
        emb = self.embed(t, class_ids)
        h, skips = self.encoder(zt, emb)
        for i, block in enumerate(self.decoder):
            h = block(h, skips[self.depth - 1 - i], emb)
        return self.head(h)
