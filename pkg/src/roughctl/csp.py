"""Control scale predictor: per-block maps from (h, h + h_cond) to a scale in (0, 1)."""

from __future__ import annotations

import torch
import torch.nn as nn

# keeps sigmoid outputs strictly inside (0, 1) in float32
LOGIT_CLAMP = 15.0


class PredictorBlock(nn.Module):
    """Three conv+ReLU stages and a 1x1 sigmoid head.

    ``granularity="global"`` mean-pools the head logits so the block emits a
    single scale per image, broadcast over space.
    """

    def __init__(self, channels: int, hidden=(1.0, 0.5, 0.25), kernel: int = 3,
                 init_bias: float = 2.0, granularity: str = "local"):
        super().__init__()
        if granularity not in ("local", "global"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.channels = channels
        self.granularity = granularity
        layers = []
        c_in = 2 * channels
        for frac in hidden:
            width = max(1, round(channels * frac))
            layers += [nn.Conv2d(c_in, width, kernel, padding=kernel // 2), nn.ReLU()]
            c_in = width
        self.stages = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 1, 1)
        nn.init.constant_(self.head.bias, init_bias)

    def forward(self, h: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        if h.shape != fused.shape or h.shape[1] != self.channels:
            raise ValueError(
                f"predictor for {self.channels} channels got {tuple(h.shape)} and {tuple(fused.shape)}"
            )
        logits = self.head(self.stages(torch.cat([h, fused], dim=1)))
        if self.granularity == "global":
            logits = logits.mean(dim=(2, 3), keepdim=True).expand(-1, -1, *h.shape[-2:])
        return torch.sigmoid(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


class ScalePredictor(nn.ModuleList):
    """One PredictorBlock per decoder block, ordered like the decoder."""

    def __init__(self, block_channels, hidden=(1.0, 0.5, 0.25), kernel: int = 3,
                 init_bias: float = 2.0, granularity: str = "local"):
        super().__init__(
            PredictorBlock(c, hidden, kernel, init_bias, granularity) for c in block_channels
        )
        self.granularity = granularity


def predict_scale(block: PredictorBlock, h: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    return block(h, fused)
