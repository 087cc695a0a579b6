"""Losses and training loops: aligned pretraining and predictor-only fine-tuning."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, PretrainConfig, TrainConfig
from .control import ControlBranch, downsample_mask
from .model import ControlledDiffusion

log = logging.getLogger(__name__)


def _open_log(path):
    if not path:
        return None
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w")


class TrainingDiverged(RuntimeError):
    pass


class FrozenParameterChanged(RuntimeError):
    pass


def loss_ldm(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def loss_c(scale_maps: Sequence[torch.Tensor], m_conflict: torch.Tensor, m_bg: torch.Tensor,
           cfg: TrainConfig) -> torch.Tensor:
    """Hinge penalty: alpha above alpha_conflict on conflicts, below alpha_bg on background.

    Masks are image-resolution [B, 1, H, W]; each block's map is compared with
    masks resized (nearest) to its own resolution, and blocks are averaged.
    """
    if len(scale_maps) == 0:
        raise ValueError("empty scale map set")
    per_block = []
    for alpha in scale_maps:
        size = alpha.shape[-1]
        mc = downsample_mask(m_conflict, size, alpha.dtype)
        mb = downsample_mask(m_bg, size, alpha.dtype)
        hinge = mc * F.relu(alpha - cfg.alpha_conflict) + mb * F.relu(cfg.alpha_bg - alpha)
        per_block.append(hinge.mean())
    return torch.stack(per_block).mean()


def total_loss(l_ldm, l_c, cfg: TrainConfig):
    return l_ldm + cfg.lambda_c * l_c


def masked_alpha_sums(scale_maps: Sequence[torch.Tensor], mask: torch.Tensor) -> tuple[float, float]:
    """(sum of alpha under mask, mask pixel count) pooled over blocks."""
    num = den = 0.0
    for alpha in scale_maps:
        m = downsample_mask(mask, alpha.shape[-1], alpha.dtype)
        num += float((alpha * m).sum())
        den += float(m.sum())
    return num, den


def state_checksum(named_params) -> str:
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _lr_at(step: int, total: int, base: float, warmup: int = 200) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class EMA:
    def __init__(self, module: torch.nn.Module, decay: float = 0.999):
        self.decay = decay
        self.shadow = copy.deepcopy(module).eval()
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, module: torch.nn.Module) -> None:
        for s, p in zip(self.shadow.parameters(), module.parameters()):
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)


def _check_finite(loss: torch.Tensor, step: int, stage: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage}: loss became {loss.item()} at step {step}")


@dataclass
class AlignedTensors:
    images: torch.Tensor   # [N, 3, H, W] in [-1, 1]
    conds: torch.Tensor    # [N, 1, H, W]
    labels: torch.Tensor   # [N]


def aligned_tensors(data, kind: str) -> AlignedTensors:
    images = torch.as_tensor(data.images * 2.0 - 1.0, dtype=torch.float32)
    conds = torch.as_tensor(data.conditions(kind), dtype=torch.float32)[:, None]
    return AlignedTensors(images, conds, torch.as_tensor(data.labels, dtype=torch.long))


def pretrain_aligned(data: AlignedTensors, model_cfg: ModelConfig, cfg: PretrainConfig,
                     metrics_log: Path | None = None, log_every: int = 100,
                     init: ControlledDiffusion | None = None) -> ControlledDiffusion:
    """Two stages: the class-conditioned backbone, then the condition branch with the backbone frozen.

    The branch starts as a copy of the trained backbone encoder with zero output
    projections. The returned model holds EMA weights of both stages. ``init``
    supplies starting weights, e.g. a trained backbone to run stage B alone.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ControlledDiffusion(model_cfg)
    if init is not None:
        model.load_state_dict(init.state_dict())
    model.unet.prior_mean.copy_(data.images.mean(0))
    sched = model.schedule
    ab = torch.as_tensor(sched.alpha_bars, dtype=torch.float32)
    n = len(data.labels)
    out = _open_log(metrics_log)

    def batch():
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        t = torch.randint(0, sched.num_steps, (cfg.batch_size,), generator=gen)
        eps = torch.randn(data.images[idx].shape, generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        zt = a.sqrt() * data.images[idx] + (1 - a).sqrt() * eps
        drop = torch.rand(cfg.batch_size, generator=gen) < model_cfg.class_dropout
        labels = torch.where(drop, model.unet.null_class, data.labels[idx])
        return idx, t, eps, zt, labels

    def record(stage, step, loss):
        if out is not None:
            out.write(json.dumps({"stage": stage, "step": step, "loss": round(loss, 6)}) + "\n")
            out.flush()
        log.info("%s step %d loss %.4f", stage, step, loss)

    # stage A: backbone
    if cfg.backbone_steps > 0:
        opt = torch.optim.AdamW(model.unet.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
        ema = EMA(model.unet)
        running = 0.0
        for step in range(cfg.backbone_steps):
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, cfg.backbone_steps, cfg.learning_rate)
            idx, t, eps, zt, labels = batch()
            loss = loss_ldm(eps, model.unet(zt, t, labels))
            _check_finite(loss, step, "backbone")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.unet.parameters(), 1.0)
            opt.step()
            ema.update(model.unet)
            running += loss.item()
            if (step + 1) % log_every == 0:
                record("backbone", step + 1, running / log_every)
                running = 0.0
        model.unet.load_state_dict(ema.shadow.state_dict())

    # stage B: condition branch on aligned conditions, backbone frozen
    if cfg.control_steps > 0:
        model.control = ControlBranch.from_backbone(model.unet)
        for p in model.unet.parameters():
            p.requires_grad_(False)
        opt = torch.optim.AdamW(model.control.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
        ema = EMA(model.control)
        running = 0.0
        for step in range(cfg.control_steps):
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, cfg.control_steps, cfg.learning_rate)
            idx, t, eps, zt, labels = batch()
            loss = loss_ldm(eps, model(zt, t, labels, cond=data.conds[idx]))
            _check_finite(loss, step, "control")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.control.parameters(), 1.0)
            opt.step()
            ema.update(model.control)
            running += loss.item()
            if (step + 1) % log_every == 0:
                record("control", step + 1, running / log_every)
                running = 0.0
        model.control.load_state_dict(ema.shadow.state_dict())
    if out is not None:
        out.close()
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


@dataclass
class UnalignedTensors:
    targets: torch.Tensor     # [N, 3, H, W] in [-1, 1]
    conds: torch.Tensor       # [N, 1, H, W] in [0, 1]
    classes: torch.Tensor     # [N] prompt class (the alternate class)
    m_conflict: torch.Tensor  # [N, 1, H, W] float
    m_bg: torch.Tensor

    def __len__(self):
        return len(self.classes)


def unaligned_tensors(samples, dtype=torch.float32) -> UnalignedTensors:
    def stack(attr):
        return np.stack([getattr(s, attr) for s in samples])

    return UnalignedTensors(
        targets=torch.as_tensor(stack("target") / 127.5 - 1.0, dtype=dtype),
        conds=torch.as_tensor(stack("condition")[:, None] / 255.0, dtype=dtype),
        classes=torch.as_tensor([s.cls_alt for s in samples], dtype=torch.long),
        m_conflict=torch.as_tensor(stack("m_conflict")[:, None], dtype=dtype),
        m_bg=torch.as_tensor(stack("m_bg")[:, None], dtype=dtype),
    )


def predictor_step_losses(model: ControlledDiffusion, batch: UnalignedTensors, t: torch.Tensor,
                          eps: torch.Tensor, cfg: TrainConfig):
    """(L_LDM, L_c, alphas) for one batch; frozen encoder and branch run without autograd."""
    ab = torch.as_tensor(model.schedule.alpha_bars, dtype=batch.targets.dtype)[t].view(-1, 1, 1, 1)
    zt = ab.sqrt() * batch.targets + (1 - ab).sqrt() * eps
    if cfg.finetune_control:
        emb = model.unet.embed(t, batch.classes)
        encoded = model.unet.encoder(zt, emb)
        feats = model.control(batch.conds, zt, emb)
    else:
        with torch.no_grad():
            emb = model.unet.embed(t, batch.classes)
            encoded = model.unet.encoder(zt, emb)
            feats = model.control(batch.conds, zt, emb)
    eps_hat, alphas = model.predict_eps(zt, t, batch.classes, feats, scale="predictor",
                                        return_alphas=True, _emb=emb, _encoded=encoded)
    return loss_ldm(eps, eps_hat), loss_c(alphas, batch.m_conflict, batch.m_bg, cfg), alphas


def _index(data: UnalignedTensors, idx) -> UnalignedTensors:
    return UnalignedTensors(data.targets[idx], data.conds[idx], data.classes[idx],
                            data.m_conflict[idx], data.m_bg[idx])


@torch.no_grad()
def alpha_mask_means(model: ControlledDiffusion, data: UnalignedTensors, timesteps: Sequence[int],
                     seed: int = 0, batch_size: int = 64) -> dict:
    """Mean predicted alpha under m_conflict and m_bg, pooled over blocks, samples and timesteps."""
    gen = torch.Generator().manual_seed(seed)
    sums = {"conflict": [0.0, 0.0], "bg": [0.0, 0.0]}
    cfg = TrainConfig()
    for t_val in timesteps:
        for start in range(0, len(data), batch_size):
            batch = _index(data, slice(start, start + batch_size))
            eps = torch.randn(batch.targets.shape, generator=gen, dtype=batch.targets.dtype)
            t = torch.full((len(batch),), int(t_val), dtype=torch.long)
            _, _, alphas = predictor_step_losses(model, batch, t, eps, cfg)
            for key, mask in (("conflict", batch.m_conflict), ("bg", batch.m_bg)):
                num, den = masked_alpha_sums(alphas, mask)
                sums[key][0] += num
                sums[key][1] += den
    return {f"alpha_{k}": (v[0] / v[1] if v[1] else float("nan")) for k, v in sums.items()}


def train_predictor(model: ControlledDiffusion, data: UnalignedTensors, cfg: TrainConfig,
                    granularity: str | None = None, metrics_log: Path | None = None,
                    probe_size: int = 128) -> list[dict]:
    """Fit freshly attached predictors with the base frozen; returns per-epoch metrics.

    Epoch 0 is measured before any update. Base parameters are checksummed
    every epoch and any change raises FrozenParameterChanged.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if model.predictor is not None:
        model.detach_predictors()
    model.attach_predictors(granularity=granularity)
    model.freeze_base(train_control=cfg.finetune_control)
    frozen = [(n, p) for n, p in model.base_parameters() if not p.requires_grad]
    checksum = state_checksum(frozen)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    out = _open_log(metrics_log)
    probe = _index(data, slice(0, probe_size))
    probe_ts = np.linspace(0, model.schedule.num_steps - 1, 4).round().astype(int)

    def emit(row):
        history.append(row)
        if out is not None:
            out.write(json.dumps(row) + "\n")
            out.flush()
        log.info("epoch %d %s", row["epoch"], {k: v for k, v in row.items() if k != "epoch"})

    history: list[dict] = []
    model.train()
    initial = alpha_mask_means(model, probe, probe_ts, seed=cfg.seed)
    emit({"epoch": 0, "l_ldm": None, "l_c": None, **{k: round(v, 6) for k, v in initial.items()}})
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        tot = {"l_ldm": 0.0, "l_c": 0.0}
        sums = {"conflict": [0.0, 0.0], "bg": [0.0, 0.0]}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = _index(data, perm[start:start + cfg.batch_size])
            t = torch.randint(0, model.schedule.num_steps, (len(batch),), generator=gen)
            eps = torch.randn(batch.targets.shape, generator=gen, dtype=batch.targets.dtype)
            l_ldm, l_c, alphas = predictor_step_losses(model, batch, t, eps, cfg)
            loss = total_loss(l_ldm, l_c, cfg)
            _check_finite(loss, epoch, "predictor")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot["l_ldm"] += l_ldm.item()
            tot["l_c"] += l_c.item()
            batches += 1
            with torch.no_grad():
                for key, mask in (("conflict", batch.m_conflict), ("bg", batch.m_bg)):
                    num, den = masked_alpha_sums(alphas, mask)
                    sums[key][0] += num
                    sums[key][1] += den
        if state_checksum(frozen) != checksum:
            raise FrozenParameterChanged(f"frozen parameters changed during epoch {epoch}")
        emit({"epoch": epoch, "l_ldm": round(tot["l_ldm"] / batches, 6), "l_c": round(tot["l_c"] / batches, 6),
              **{f"alpha_{k}": round(v[0] / v[1], 6) if v[1] else None for k, v in sums.items()}})
    if out is not None:
        out.close()
    model.eval()
    for p in model.predictor.parameters():
        p.requires_grad_(False)
    return history
