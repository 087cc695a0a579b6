"""Backbone + condition branch + optional scale predictors, and the DDIM sampler."""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .backbone import UNet, make_noise_schedule
from .config import ModelConfig
from .control import ControlBranch, fuse
from .csp import ScalePredictor

PREDICTOR = "predictor"

Scale = Union[None, float, str, Sequence[torch.Tensor]]


class ControlledDiffusion(nn.Module):
    """Epsilon model with decoder fusion h^{i+1} = D^i(h^i + alpha^i * h_cond^i)."""

    def __init__(self, cfg: ModelConfig, with_control: bool = True):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg)
        self.control = ControlBranch(cfg) if with_control else None
        self.predictor: ScalePredictor | None = None
        self.schedule = make_noise_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    @property
    def depth(self) -> int:
        return self.unet.depth

    def prompt_embedding(self, class_ids: torch.Tensor) -> torch.Tensor:
        return self.unet.class_emb(class_ids)

    def encode_condition(self, cond, zt, t, class_ids) -> list[torch.Tensor]:
        if self.control is None:
            raise RuntimeError("model has no condition branch")
        return self.control(cond, zt, self.unet.embed(t, class_ids))

    def _alpha(self, i: int, h, h_cond, scale: Scale):
        if scale is None:
            return 1.0
        if isinstance(scale, str):
            if scale != PREDICTOR:
                raise ValueError(f"unknown scale source {scale!r}")
            if self.predictor is None:
                raise RuntimeError("predictor scale requested but no predictor is attached")
            return self.predictor[i](h, h + h_cond)
        if isinstance(scale, (int, float)):
            return float(scale)
        return scale[i]

    def predict_eps(self, zt, t, class_ids, cond_features=None, scale: Scale = None,
                    return_alphas: bool = False, _emb=None, _encoded=None):
        """Noise prediction; ``cond_features`` None means the branch is not attached at all."""
        emb = self.unet.embed(t, class_ids) if _emb is None else _emb
        h, skips = self.unet.encoder(zt, emb) if _encoded is None else _encoded
        if cond_features is not None and len(cond_features) != self.depth:
            raise ValueError(f"expected {self.depth} condition features, got {len(cond_features)}")
        if scale is not None and not isinstance(scale, (str, int, float)) and len(scale) != self.depth:
            raise ValueError(f"expected {self.depth} scale maps, got {len(scale)}")
        alphas = []
        for i, block in enumerate(self.unet.decoder):
            if cond_features is not None:
                alpha = self._alpha(i, h, cond_features[i], scale)
                alphas.append(alpha)
                h = fuse(h, cond_features[i], alpha)
            h = block(h, skips[self.depth - 1 - i], emb)
        eps = self.unet.head(h)
        return (eps, alphas) if return_alphas else eps

    def forward(self, zt, t, class_ids, cond=None, scale: Scale = None, return_alphas: bool = False):
        emb = self.unet.embed(t, class_ids)
        feats = None if cond is None else self.control(cond, zt, emb)
        return self.predict_eps(zt, t, class_ids, feats, scale, return_alphas, _emb=emb)

    # -- predictor management -------------------------------------------------

    def attach_predictors(self, depth: int | None = None, granularity: str | None = None) -> ScalePredictor:
        """Register one predictor per decoder block and freeze everything else."""
        if self.predictor is not None:
            raise RuntimeError("predictors already attached")
        if depth is not None and depth != self.depth:
            raise ValueError(f"depth {depth} does not match decoder depth {self.depth}")
        cfg = self.cfg
        channels = [c for c, _, _ in self.unet.block_shapes()]
        self.predictor = ScalePredictor(
            channels, cfg.predictor_hidden, cfg.predictor_kernel, cfg.predictor_init_bias,
            granularity or cfg.predictor_granularity,
        ).to(next(self.unet.parameters()).dtype)
        self.freeze_base()
        return self.predictor

    def detach_predictors(self) -> ScalePredictor | None:
        pred, self.predictor = self.predictor, None
        return pred

    def freeze_base(self, train_control: bool = False) -> None:
        for p in self.unet.parameters():
            p.requires_grad_(False)
        if self.control is not None:
            for p in self.control.parameters():
                p.requires_grad_(train_control)
        if self.predictor is not None:
            for p in self.predictor.parameters():
                p.requires_grad_(True)

    def base_parameters(self):
        yield from self.unet.named_parameters(prefix="backbone")
        if self.control is not None:
            yield from self.control.named_parameters(prefix="control")


def ddim_timesteps(num_steps: int, sample_steps: int) -> np.ndarray:
    ts = np.unique(np.linspace(0, num_steps - 1, sample_steps).round().astype(int))
    return ts[::-1].copy()


def initial_noise(seeds: Sequence[int], shape, dtype=torch.float32) -> torch.Tensor:
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s))
        out.append(torch.randn(shape, generator=g, dtype=torch.float32))
    return torch.stack(out).to(dtype)


@torch.no_grad()
def sample(model: ControlledDiffusion, class_ids, seeds: Sequence[int], cond=None, scale: Scale = 1.0,
           steps: int = 50, on_step: Callable | None = None, guidance: float | None = None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from per-item seeded noise; returns images in [-1, 1].

    ``cond=None`` samples without the condition branch. ``scale`` is a scalar,
    per-block maps, or ``"predictor"``. ``on_step(t, alphas)`` sees the scales used
    for the class-conditioned pass. ``guidance`` (default ``model.cfg.guidance``)
    mixes in a null-class pass that shares the condition and scales; 1.0 disables it.
    """
    if scale == PREDICTOR and model.predictor is None:
        raise RuntimeError("predictor mode requested without a trained predictor")
    cfg = model.cfg
    w = cfg.guidance if guidance is None else float(guidance)
    dtype = next(model.parameters()).dtype
    class_ids = torch.as_tensor(class_ids, dtype=torch.long)
    n = len(class_ids)
    ab = model.schedule.alpha_bars
    ts = ddim_timesteps(model.schedule.num_steps, steps)
    a_first = float(ab[ts[0]])
    noise = initial_noise(seeds, (cfg.channels, cfg.image_size, cfg.image_size), dtype)
    x = (1.0 - a_first) ** 0.5 * noise + a_first ** 0.5 * model.unet.prior_mean.to(dtype)
    if cond is not None:
        cond = torch.as_tensor(cond, dtype=dtype)
    guided = w != 1.0
    if guided:
        class_ids = torch.cat([class_ids, torch.full_like(class_ids, model.unet.null_class)])
        cond = None if cond is None else torch.cat([cond, cond])
        if scale is not None and not isinstance(scale, (str, int, float)):
            scale = [torch.cat([s, s]) for s in scale]
    was_training = model.training
    model.eval()
    for k, t in enumerate(ts):
        zin = torch.cat([x, x]) if guided else x
        t_batch = torch.full((len(zin),), int(t), dtype=torch.long)
        eps, alphas = model(zin, t_batch, class_ids, cond=cond, scale=scale, return_alphas=True)
        if guided:
            eps = eps[n:] + w * (eps[:n] - eps[n:])
            alphas = [a[:n] if torch.is_tensor(a) else a for a in alphas]
        if on_step is not None:
            on_step(int(t), alphas)
        a_t = float(ab[t])
        a_prev = float(ab[ts[k + 1]]) if k + 1 < len(ts) else 1.0
        x0 = ((x - (1.0 - a_t) ** 0.5 * eps) / a_t ** 0.5).clamp(-1.0, 1.0)
        eps = (x - a_t ** 0.5 * x0) / (1.0 - a_t) ** 0.5   # keep eps consistent with the clamped x0
        x = a_prev ** 0.5 * x0 + (1.0 - a_prev) ** 0.5 * eps
    model.train(was_training)
    return x


def to_unit(images: torch.Tensor) -> np.ndarray:
    """[-1, 1] tensors to float64 arrays in [0, 1]."""
    return ((images.double().clamp(-1, 1) + 1.0) / 2.0).cpu().numpy()
